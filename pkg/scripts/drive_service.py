#!/usr/bin/env python3
"""Smoke-drive a live service over real HTTP + WebSocket.

Creates a session on the close-crossing preset with truths revealed,
steps through the episode clicking the first two missed objects, and
fails loudly unless the clicks resolve into prompts, prompt-provenance
detections appear on the stream, and the replay/buffer dumps agree with
what the stream delivered. Needs a running server, e.g.:

    promptloop serve --checkpoint assets/reference/checkpoint.json --port 8787

Requires the `websockets` client package (not a runtime dependency).
"""

import argparse
import asyncio
import json

import httpx
import websockets


async def recv_until(stash, ws, want_type, op=None, limit=30):
    """Return the first matching message, stashing any others seen.

    Broadcasts (buffer snapshots, frames from other actors) interleave
    with command acks on one socket; the stash keeps them claimable.
    """
    for i, msg in enumerate(stash):
        if msg["type"] == want_type and (op is None
                                         or msg["payload"].get("op") == op):
            return stash.pop(i)
    for _ in range(limit):
        msg = json.loads(await asyncio.wait_for(ws.recv(), timeout=15))
        if msg["type"] == "error":
            raise AssertionError(f"server error: {msg['payload']}")
        if msg["type"] == want_type and (op is None
                                         or msg["payload"].get("op") == op):
            return msg
        stash.append(msg)
    raise AssertionError(f"never saw {want_type}/{op}")


async def drive(base: str) -> None:
    async with httpx.AsyncClient() as cx:
        info = (await cx.get(base + "/")).json()
        assert info["protocol"] == 1, info
        grid = info["grid"]
        cell = grid["extent"] / grid["w"]
        half = grid["extent"] / 2.0
        r = await cx.post(base + "/sessions", json={
            "preset": "close-crossing", "seed": 0, "reveal_truths": True})
        assert r.status_code == 201, r.text
        created = r.json()
        sid = created["session"]
        n_frames = created["n_frames"]
        print(f"session {sid}: {n_frames} frames, policy {created['policy']}")

    stash = []
    uri = base.replace("http", "ws", 1) + f"/sessions/{sid}/stream"
    clicked = corrected = 0
    async with websockets.connect(uri) as ws:
        ack = await recv_until(stash, ws, "ack", "connect")
        assert ack["payload"]["protocol"] == 1

        for _ in range(n_frames):
            await ws.send(json.dumps({"type": "control",
                                      "payload": {"op": "step"}}))
            fr = await recv_until(stash, ws, "frame")
            p = fr["payload"]
            corrected += sum(d["provenance"].startswith("prompt")
                             for d in p["detections"])
            # a visible truth with no merged detection within 2 m of it
            centers = [d["box"]["center"] for d in p["detections"]]
            missed = [tr for tr in p["truths"] if tr["visible"] and not any(
                abs(c[0] - tr["box"]["center"][0]) < 2.0
                and abs(c[1] - tr["box"]["center"][1]) < 2.0
                for c in centers)]
            if missed and clicked < 2:
                x, y = missed[0]["box"]["center"][:2]
                await ws.send(json.dumps({
                    "type": "click", "frame": fr["frame"],
                    "payload": {"u": (x + half) / cell,
                                "v": (y + half) / cell}}))
                ack = await recv_until(stash, ws, "ack", "click")
                print(f"frame {fr['frame']}: clicked {missed[0]['entity_id']}"
                      f" -> {ack['payload']['prompt_id']}"
                      f" (low_quality={ack['payload']['low_quality']})")
                buf = await recv_until(stash, ws, "buffer")
                assert buf["payload"]["size"] >= 1
                clicked += 1
            if p["finished"]:
                break

        await ws.send(json.dumps({"type": "buffer", "payload": {}}))
        snap = await recv_until(stash, ws, "buffer")
        print("final buffer ids:",
              [e["prompt_id"] for e in snap["payload"]["entries"]])

    assert clicked > 0, "never saw a missed visible truth to click"
    assert corrected > 0, "no prompt-provenance detections streamed"
    print(f"OK: {clicked} clicks, {corrected} prompt-corrected detections")

    async with httpx.AsyncClient() as cx:
        replay = (await cx.get(base + f"/sessions/{sid}/replay")).json()
        dump = (await cx.get(base + f"/sessions/{sid}/buffer")).json()
        n_events = sum(len(f["events"]) for f in replay["frames"])
        print(f"replay: {len(replay['frames'])} frames, {n_events} feedback "
              f"events; buffer dump: {len(dump['entries'])} entries")
        assert n_events == clicked


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--base", default="http://127.0.0.1:8787",
                    help="server base URL")
    args = ap.parse_args()
    asyncio.run(drive(args.base))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
