#!/usr/bin/env python3
"""Loopback fixture for console integration tests.

Starts an operation service in this process and the real
`surgestream mentor --gateway` CLI as a subprocess (mirroring the
deployed two-process topology), then reports what the tests need:

    READY {"ws": ..., "targets": {name: {"point": [x,y,z],
                                          "pixel": [u,v]}}, ...}
    OVERLAY {"generation": g, "markers": [[u,v], ...]}   (one line per
    console render whose guidance generation changed)

Runs until stdin closes.
"""

import json
import subprocess
import sys
import threading
import time

from surgestream.geometry import project_point
from surgestream.operation import (
    OperationConfig,
    OperationService,
    SyntheticSource,
)
from surgestream.stereo import peg_scene_spec


def main() -> int:
    spec = peg_scene_spec(640, 512)
    op = OperationService(
        OperationConfig(
            calib=spec.intrinsics,
            source=SyntheticSource(spec, count=10_000_000),
            fps=20.0,
            quality=90,
            record_overlay=True,
        )
    )
    op.start()

    mentor = subprocess.Popen(
        [sys.executable, "-m", "surgestream.cli", "mentor",
         "--connect", f"127.0.0.1:{op.bound_port}",
         "--gateway", "127.0.0.1:0"],
        stdout=subprocess.PIPE,
        stderr=subprocess.DEVNULL,
        text=True,
    )
    ws_url = None
    deadline = time.time() + 30
    while time.time() < deadline and ws_url is None:
        line = mentor.stdout.readline()
        if not line:
            time.sleep(0.05)
            continue
        if "gateway listening on" in line:
            ws_url = line.strip().split()[-1]
    if ws_url is None:
        print("FIXTURE-ERROR gateway did not start", flush=True)
        op.stop()
        mentor.kill()
        return 1

    targets = {}
    for name, point in spec.named_targets().items():
        u, v = project_point(spec.intrinsics, point)
        targets[name] = {"point": [float(c) for c in point],
                         "pixel": [u, v]}
    print("READY " + json.dumps({
        "ws": ws_url,
        "width": spec.intrinsics.width,
        "height": spec.intrinsics.height,
        "targets": targets,
    }), flush=True)

    stop = threading.Event()

    def overlay_pump():
        last_generation = -1
        while not stop.is_set():
            with op.stats.lock:
                records = list(op.stats.overlay_records)
            for rec in records:
                if rec.generation <= last_generation:
                    continue
                last_generation = rec.generation
                markers = [
                    [int(round(item.points[0][0])),
                     int(round(item.points[0][1]))]
                    for item in rec.items
                    if item.kind == "crosshair"
                ]
                print("OVERLAY " + json.dumps(
                    {"generation": rec.generation, "markers": markers}
                ), flush=True)
            time.sleep(0.01)

    pump = threading.Thread(target=overlay_pump, daemon=True)
    pump.start()

    sys.stdin.read()  # hold everything up until the parent hangs up
    stop.set()
    mentor.terminate()
    try:
        mentor.wait(timeout=5)
    except subprocess.TimeoutExpired:
        mentor.kill()
    op.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
