"""CLI smoke tests: argument wiring, scene asset emission, kernel-bench
output, and a tiny end-to-end operation|mentor run through the console
entry points.
"""

import json
import subprocess
import sys
import time

import pytest

from surgestream.cli import build_parser, main


def test_parser_rejects_unknown_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["frobnicate"])


def test_scene_command_emits_assets(tmp_path):
    spec_path = tmp_path / "scene.json"
    calib_path = tmp_path / "calib.json"
    render_dir = tmp_path / "render"
    rc = main([
        "scene", "--preset", "peg", "--width", "160", "--height", "128",
        "--spec", str(spec_path), "--calib", str(calib_path),
        "--render", str(render_dir),
    ])
    assert rc == 0
    assert json.loads(spec_path.read_text())["intrinsics"]["width"] == 160
    assert json.loads(calib_path.read_text())["width"] == 160
    assert (render_dir / "left_000000.png").exists()
    assert (render_dir / "right_000000.png").exists()
    assert (render_dir / "disp_000000.pfm").exists()


def test_kernel_bench_command(tmp_path, capsys):
    out = tmp_path / "kernels.json"
    rc = main(["kernel-bench", "--width", "96", "--height", "64",
               "--d-max", "8", "--window", "5", "--repeat", "1",
               "--out", str(out)])
    assert rc == 0
    doc = json.loads(out.read_text())
    assert "numpy" in doc["backends"]
    text = capsys.readouterr().out
    assert "block_match_ms" in text


def test_bench_command_tiny(tmp_path, capsys):
    rc = main(["bench", "--resolutions", "160x128", "--frames", "6",
               "--quality", "90", "--out", str(tmp_path / "report")])
    assert rc == 0
    summary = json.loads((tmp_path / "report" / "summary.json").read_text())
    assert summary["resolutions"][0]["width"] == 160
    assert (tmp_path / "report" / "latency.csv").exists()


def test_operation_and_mentor_cli_end_to_end(tmp_path):
    spec_path = tmp_path / "scene.json"
    calib_path = tmp_path / "calib.json"
    main(["scene", "--preset", "peg", "--width", "160", "--height", "128",
          "--spec", str(spec_path), "--calib", str(calib_path)])
    script_path = tmp_path / "script.json"
    script_path.write_text(json.dumps({
        "actions": [
            {"kind": "wait", "ms": 100},
            {"kind": "point_at", "target": [0.0, 0.0, 0.4]},
            {"kind": "clear"},
        ]
    }))
    out_dir = tmp_path / "console"
    op_stats = tmp_path / "op.csv"
    mentor_stats = tmp_path / "mentor.csv"

    op_cmd = [
        sys.executable, "-m", "surgestream.cli", "operation",
        "--source", str(spec_path), "--calib", str(calib_path),
        "--listen", "127.0.0.1:0", "--quality", "90", "--fps", "20",
        "--frames", "40", "--out", str(out_dir), "--stats", str(op_stats),
    ]
    # Ephemeral port: point the mentor at the port the service reports.
    proc = subprocess.Popen(op_cmd, stdout=subprocess.PIPE,
                            stderr=subprocess.STDOUT, text=True)
    try:
        port = None
        deadline = time.time() + 15
        lines = []
        while time.time() < deadline and port is None:
            line = proc.stdout.readline()
            if not line:
                time.sleep(0.05)
                continue
            lines.append(line)
            if "listening on" in line:
                port = int(line.rsplit(":", 1)[-1])
        assert port, f"no listen line from operation CLI: {lines}"
        rc = main(["mentor", "--connect", f"127.0.0.1:{port}",
                   "--script", str(script_path),
                   "--stats", str(mentor_stats)])
        assert rc == 0
        proc.wait(timeout=30)
    finally:
        if proc.poll() is None:
            proc.kill()
    assert proc.returncode == 0
    assert op_stats.exists() and mentor_stats.exists()
    assert len(list(out_dir.glob("frame_*.png"))) == 40
    assert len(mentor_stats.read_text().splitlines()) > 1
