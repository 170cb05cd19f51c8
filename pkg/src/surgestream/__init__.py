"""Closed-loop RGB-D streaming and telementoring stack for robotic-surgery
training: operation-side capture/encode/stream, mentor-side reconstruction
and guidance feedback, and a latency/accuracy benchmark harness.
"""

__version__ = "0.1.0"
