"""promptloop: desk-scale test bench for prompt-driven online detector correction.

A deliberately degraded synthetic 3D detector runs over simulated driving
scenes; click feedback on missed objects becomes visual prompts that a trained
adapter aligns against the streaming frame grid to recover detections online,
without touching detector or adapter weights at test time.
"""

__version__ = "0.1.0"
