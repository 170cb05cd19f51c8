"""Command-line entry points for the streaming stack.

    surgestream operation --source scene.json --calib calib.json \
        --listen 0.0.0.0:7421 --quality 90 --out frames/ --stats op.csv
    surgestream mentor --connect host:7421 --script script.json --stats m.csv
    surgestream mentor --connect host:7421 --gateway 127.0.0.1:8765
    surgestream bench --resolutions 640x512,320x240 --frames 100 \
        --quality 90 --out report/
    surgestream scene --preset peg --spec scene.json [--render dir/]
    surgestream kernel-bench [--width 640 --height 512]
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__

logger = logging.getLogger(__name__)


def _parse_addr(text: str, default_port: int) -> tuple:
    if ":" in text:
        host, port = text.rsplit(":", 1)
        return host, int(port)
    return text, default_port


def _parse_resolutions(text: str):
    out = []
    for token in text.split(","):
        w, h = token.lower().split("x")
        out.append((int(w), int(h)))
    return out


def _parse_quality(text: str):
    return text if text == "lossless" else int(text)


def cmd_operation(args) -> int:
    from .geometry import CameraIntrinsics
    from .operation import (
        ImageDirSource,
        OperationConfig,
        OperationService,
        SyntheticSource,
    )
    from .stereo import SceneSpec
    from .transport import DEFAULT_PORT

    calib = CameraIntrinsics.from_json(args.calib)
    source_path = Path(args.source)
    if source_path.is_dir():
        source = ImageDirSource(source_path, calib, d_max=args.d_max,
                                window=args.window)
    else:
        spec = SceneSpec.from_json(source_path)
        source = SyntheticSource(spec, count=args.frames)
        calib = spec.intrinsics
    host, port = _parse_addr(args.listen, DEFAULT_PORT)
    config = OperationConfig(
        calib=calib,
        source=source,
        listen_host=host,
        listen_port=port,
        quality=_parse_quality(args.quality),
        out_dir=Path(args.out) if args.out else None,
        stats_path=args.stats,
        fps=args.fps,
        stereo_output=args.stereo_output,
        disparity_prescale=args.prescale,
        max_payload=args.max_payload,
    )
    service = OperationService(config)
    try:
        service.start()
    except OSError as exc:
        logger.error("could not start operation service: %s", exc)
        return 1
    print(f"listening on {host}:{service.bound_port}", flush=True)
    try:
        service.wait_done()
    except KeyboardInterrupt:
        pass
    service.stop()
    print(f"frames={service.stats.frames_rendered} "
          f"sent={service.stats.frames_sent} "
          f"dropped={service.stats.frames_dropped}")
    return 0


def cmd_mentor(args) -> int:
    from .mentor import MentorAgentScript, MentorClient, MentorConfig
    from .transport import DEFAULT_PORT

    host, port = _parse_addr(args.connect, DEFAULT_PORT)
    script = MentorAgentScript.from_json(args.script) if args.script else None
    config = MentorConfig(
        host=host,
        port=port,
        script=script,
        stats_path=args.stats,
        frame_limit=args.frames,
        max_payload=args.max_payload,
    )
    client = MentorClient(config)
    try:
        client.connect()
    except ConnectionError as exc:
        logger.error("%s", exc)
        return 1
    client.start()
    gateway = None
    if args.gateway:
        from .gateway import GatewayServer

        ghost, gport = _parse_addr(args.gateway, 8765)
        gateway = GatewayServer(client, host=ghost, port=gport)
        gateway.start()
        print(f"gateway listening on ws://{ghost}:{gateway.port}/ws",
              flush=True)
    try:
        client.join()
    except KeyboardInterrupt:
        pass
    finally:
        if gateway is not None:
            gateway.stop()
        client.stop()
    print(f"frames={client.frames_processed} skipped={client.skipped} "
          f"fps={client.fps.fps():.2f}")
    return 0


def cmd_bench(args) -> int:
    from .bench import (
        measure_reprojection_error,
        run_benchmark,
        write_report,
    )
    from .stereo import peg_scene_spec

    quality = _parse_quality(args.quality)
    report = run_benchmark(
        resolutions=_parse_resolutions(args.resolutions),
        frames_per_res=args.frames,
        quality=quality,
        repetitions=args.repetitions,
    )
    if args.accuracy:
        spec = peg_scene_spec(640, 512)
        for path in ("lossless", quality):
            rows, stats = measure_reprojection_error(spec, path=path,
                                                     trials=args.trials)
            report.accuracy_rows.extend(rows)
            report.accuracy.extend(stats)
    paths = write_report(report, args.out)
    for res in report.resolutions:
        print(f"{res.width}x{res.height}: fps={res.fps:.2f} "
              f"closed_loop_mean={res.closed_loop['mean'] / 1000.0:.2f} ms "
              f"frames={res.frames}")
    for entry in report.accuracy:
        if entry.get("skipped"):
            print(f"accuracy[{entry['path']}] {entry['target']}: skipped")
        else:
            print(f"accuracy[{entry['path']}] {entry['target']}: "
                  f"{entry['mean_px']:.3f} +/- {entry['stdev_px']:.3f} px")
    print("report written to", paths["summary"])
    return 0 if not report.failures else 2


def cmd_scene(args) -> int:
    from . import codec
    from .stereo import gen_synthetic_scene, peg_scene_spec, reference_scene_spec

    if args.preset == "peg":
        spec = peg_scene_spec(args.width, args.height, seed=args.seed)
    else:
        spec = reference_scene_spec()
    spec.to_json(args.spec)
    print("scene spec written to", args.spec)
    if args.render:
        from PIL import Image

        out = Path(args.render)
        out.mkdir(parents=True, exist_ok=True)
        pair = gen_synthetic_scene(spec)
        Image.fromarray(pair.left).save(out / "left_000000.png")
        Image.fromarray(pair.right).save(out / "right_000000.png")
        codec.write_pfm(out / "disp_000000.pfm", pair.gt)
        print("rendered frame + PFM ground truth in", out)
    if args.calib:
        spec.intrinsics.to_json(args.calib)
        print("calibration written to", args.calib)
    return 0


def cmd_kernel_bench(args) -> int:
    from . import kernels

    results = kernels.benchmark_backends(
        width=args.width, height=args.height, window=args.window,
        d_max=args.d_max, repeat=args.repeat,
    )
    print(f"active backend: {kernels.active_backend()}")
    print(f"inputs: {results['width']}x{results['height']} "
          f"window={results['window']} d_max={results['d_max']}")
    header = f"{'kernel':<16}" + "".join(
        f"{name:>12}" for name in results["backends"]
    )
    print(header)
    for kernel in ("block_match_ms", "build_cloud_ms"):
        row = f"{kernel:<16}"
        for name in results["backends"]:
            row += f"{results['backends'][name][kernel]:>12.2f}"
        print(row)
    if "native" in results["backends"]:
        for kernel in ("block_match_ms", "build_cloud_ms"):
            numpy_ms = results["backends"]["numpy"][kernel]
            native_ms = results["backends"]["native"][kernel]
            if native_ms > 0:
                print(f"{kernel}: native speedup {numpy_ms / native_ms:.2f}x")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2)
        print("written to", args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surgestream",
        description="RGB-D telementoring streaming stack",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("operation", help="run the trainee-side service")
    p.add_argument("--source", required=True,
                   help="scene spec JSON or image-sequence directory")
    p.add_argument("--calib", required=True, help="calibration JSON")
    p.add_argument("--listen", default="0.0.0.0:7421")
    p.add_argument("--quality", default="90", help="1-100 or 'lossless'")
    p.add_argument("--out", default=None, help="annotated frame directory")
    p.add_argument("--stats", default=None, help="stats CSV path")
    p.add_argument("--fps", type=float, default=30.0, help="0 = unpaced")
    p.add_argument("--frames", type=int, default=300,
                   help="frame count for synthetic sources")
    p.add_argument("--prescale", type=float, default=1.0)
    p.add_argument("--d-max", type=int, default=64)
    p.add_argument("--window", type=int, default=9)
    p.add_argument("--stereo-output", action="store_true")
    p.add_argument("--max-payload", type=int, default=32 * 1024 * 1024,
                   help="receive-side payload cap in bytes")
    p.set_defaults(fn=cmd_operation)

    p = sub.add_parser("mentor", help="run the mentor-side client")
    p.add_argument("--connect", required=True)
    p.add_argument("--script", default=None, help="mentor script JSON")
    p.add_argument("--gateway", default=None,
                   help="serve the web console gateway at host:port")
    p.add_argument("--stats", default=None)
    p.add_argument("--frames", type=int, default=None,
                   help="stop after N processed frames")
    p.add_argument("--max-payload", type=int, default=32 * 1024 * 1024,
                   help="receive-side payload cap in bytes")
    p.set_defaults(fn=cmd_mentor)

    p = sub.add_parser("bench", help="loopback latency/accuracy benchmark")
    p.add_argument("--resolutions",
                   default="1280x720,960x540,640x480,480x360,320x240")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--quality", default="90")
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--accuracy", action="store_true",
                   help="also run the re-projection protocol")
    p.add_argument("--trials", type=int, default=30)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("scene", help="emit synthetic scene assets")
    p.add_argument("--preset", choices=("peg", "reference"), default="peg")
    p.add_argument("--spec", required=True, help="output spec JSON")
    p.add_argument("--calib", default=None, help="also write calibration JSON")
    p.add_argument("--render", default=None,
                   help="render PNG frames + PFM ground truth here")
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(fn=cmd_scene)

    p = sub.add_parser("kernel-bench",
                       help="compare compiled vs NumPy kernel backends")
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--window", type=int, default=9)
    p.add_argument("--d-max", type=int, default=64)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--out", default=None, help="JSON output path")
    p.set_defaults(fn=cmd_kernel_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
