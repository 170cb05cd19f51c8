"""Loopback benchmark harness: per-stage and closed-loop latency across
resolutions, mentor-side frame rate, and re-projection accuracy.

Operation and mentor endpoints run as concurrent in-process contexts on a
loopback socket, which keeps every stage on one monotonic clock. Stage
boundaries are the pipeline hand-off points:

    disparity -> encode -> transmit -> decode -> render (cloud build +
    view transform) -> feedback transmit -> overlay

closed_loop_us is the time from frame capture on the operation side to
the first console overlay carrying the guidance that frame triggered.
"""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .geometry import project_point
from .mentor import MentorClient, MentorConfig
from .operation import OperationConfig, OperationService, SyntheticSource
from .stereo import SceneSpec, peg_scene_spec

logger = logging.getLogger(__name__)

__all__ = [
    "PAPER_RESOLUTIONS",
    "StageTiming",
    "AccuracyTrial",
    "ResolutionStats",
    "BenchReport",
    "run_benchmark",
    "measure_reprojection_error",
    "write_report",
    "read_latency_csv",
    "summarize_rows",
]

# Resolution ladder used for the frame-rate trend measurements.
PAPER_RESOLUTIONS: Tuple[Tuple[int, int], ...] = (
    (1280, 720),
    (960, 540),
    (640, 480),
    (480, 360),
    (320, 240),
)

STAGE_NAMES = (
    "disparity_us",
    "encode_us",
    "transmit_us",
    "decode_us",
    "render_us",
    "feedback_transmit_us",
    "overlay_us",
)


@dataclass
class StageTiming:
    resolution: str
    rep: int
    seq: int
    capture_us: int
    disparity_us: int
    encode_us: int
    transmit_us: int
    decode_us: int
    render_us: int
    feedback_transmit_us: int
    overlay_us: int
    closed_loop_us: int


@dataclass
class AccuracyTrial:
    path: str
    target: str
    trial: int
    err_px: float
    marker_u: int
    marker_v: int
    gt_u: float
    gt_v: float


@dataclass
class ResolutionStats:
    width: int
    height: int
    frames: int
    fps: float
    fps_runs: List[float]
    stage_stats: Dict[str, Dict[str, float]]
    closed_loop: Dict[str, float]
    payload_mean_bytes: float
    frames_dropped: int


@dataclass
class BenchReport:
    rows: List[StageTiming] = field(default_factory=list)
    resolutions: List[ResolutionStats] = field(default_factory=list)
    accuracy_rows: List[AccuracyTrial] = field(default_factory=list)
    accuracy: List[dict] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    no_data: bool = False


def _mean_stdev(values: Sequence[float]) -> Dict[str, float]:
    if not values:
        return {"mean": 0.0, "stdev": 0.0, "count": 0}
    mean = statistics.fmean(values)
    stdev = statistics.stdev(values) if len(values) > 1 else 0.0
    return {"mean": mean, "stdev": stdev, "count": len(values)}


class _LoopbackRun:
    """One operation+mentor pair wired over 127.0.0.1."""

    def __init__(self, spec: SceneSpec, quality, frames: int,
                 on_frame=None, frame_mutator=None, fps: float = 0.0,
                 source_frames: Optional[int] = None):
        self.spec = spec
        source = SyntheticSource(spec, count=source_frames or 10_000_000)
        self.op = OperationService(
            OperationConfig(
                calib=spec.intrinsics,
                source=source,
                listen_port=0,
                quality=quality,
                fps=fps,
                record_overlay=True,
                frame_mutator=frame_mutator,
            )
        )
        self.frames = frames
        self.on_frame = on_frame
        self.mentor: Optional[MentorClient] = None

    def run(self, timeout: Optional[float] = None) -> None:
        import sys

        from .geometry import RigidTransform, euler_to_rotation

        old_interval = sys.getswitchinterval()
        sys.setswitchinterval(0.0005)  # finer GIL slicing between stages
        self.op.start()
        self.mentor = MentorClient(
            MentorConfig(
                host="127.0.0.1",
                port=self.op.bound_port,
                frame_limit=self.frames,
                on_frame=self.on_frame,
            )
        )
        # A non-trivial view keeps the measured render stage honest (the
        # identity chain short-circuits to a no-op).
        self.mentor.view.set_placement(
            RigidTransform(R=euler_to_rotation(0.2, 0.1, -0.15),
                           t=np.array([0.05, -0.02, 0.10])),
            scale=1.5,
        )
        self.mentor.view.set_viewer(
            RigidTransform(R=euler_to_rotation(-0.1, 0.05, 0.0),
                           t=np.array([0.0, 0.1, -0.3]))
        )
        try:
            self.mentor.connect()
            self.mentor.start()
            if timeout is None:
                timeout = 60.0 + 0.5 * self.frames
            self.mentor.join(timeout=timeout)
            time.sleep(0.15)  # let the last feedback reach an overlay
        finally:
            self.mentor.stop()
            self.op.stop()
            sys.setswitchinterval(old_interval)


def _join_stage_rows(op: OperationService, mentor: MentorClient,
                     resolution: str, rep: int) -> List[StageTiming]:
    """Merge both endpoints' per-frame records into stage rows."""
    import bisect

    rows: List[StageTiming] = []
    with op.stats.lock:
        frames = dict(op.stats.frames)
        seq_to_index = dict(op.stats.seq_to_index)
        events = list(op.stats.guidance_events)
        overlays = list(op.stats.overlay_records)
    mentor_rows = {r.seq: r for r in mentor.rows}
    # Overlay generations are non-decreasing in render order; the closed
    # loop ends at the first console render whose state includes the
    # feedback (generation >= the one the feedback produced).
    overlay_gens = [rec.generation for rec in overlays]

    for event in events:
        if event.m != 1:
            continue
        idx = seq_to_index.get(event.based_on_seq)
        mrow = mentor_rows.get(event.based_on_seq)
        pos = bisect.bisect_left(overlay_gens, event.generation)
        overlay = overlays[pos] if pos < len(overlays) else None
        if idx is None or mrow is None or overlay is None:
            continue
        rec = frames[idx]
        send_start_us = rec.send_done_us - rec.send_us
        rows.append(
            StageTiming(
                resolution=resolution,
                rep=rep,
                seq=event.based_on_seq,
                capture_us=rec.capture_us,
                disparity_us=rec.disparity_us,
                encode_us=rec.encode_us,
                transmit_us=max(0, mrow.recv_us - send_start_us),
                decode_us=mrow.decode_us,
                render_us=mrow.cloud_us + mrow.render_us,
                feedback_transmit_us=max(
                    0, event.recv_us - event.feedback_sent_us
                ),
                overlay_us=overlay.overlay_us,
                closed_loop_us=overlay.done_us - rec.capture_us,
            )
        )
    return rows


def run_benchmark(
    resolutions: Sequence[Tuple[int, int]] = PAPER_RESOLUTIONS,
    frames_per_res: int = 100,
    quality: Union[int, str] = 90,
    repetitions: int = 1,
    scene_seed: int = 7,
) -> BenchReport:
    """Full closed-loop run per resolution; one pointer feedback per frame."""
    report = BenchReport(
        config={
            "resolutions": [f"{w}x{h}" for w, h in resolutions],
            "frames_per_res": frames_per_res,
            "quality": quality,
            "repetitions": repetitions,
            "scene_seed": scene_seed,
        }
    )
    if frames_per_res <= 0 or not resolutions:
        report.no_data = True
        return report

    for width, height in resolutions:
        res_label = f"{width}x{height}"
        spec = peg_scene_spec(width, height, seed=scene_seed)
        target = spec.named_targets()["peg_start"]
        res_rows: List[StageTiming] = []
        fps_runs: List[float] = []
        payload_bytes: List[float] = []
        dropped = 0

        for rep in range(repetitions):
            def echo_agent(client, scene, _t=target):
                client.send_pointer(_t)

            run = _LoopbackRun(spec, quality, frames_per_res + 3,
                               on_frame=echo_agent)
            try:
                run.run()
            except Exception as exc:  # partial report on session failure
                msg = f"{res_label} rep {rep}: {exc}"
                logger.error("benchmark run failed: %s", msg)
                report.failures.append(msg)
                continue
            rows = _join_stage_rows(run.op, run.mentor, res_label, rep)
            res_rows.extend(rows)
            fps_runs.append(run.mentor.fps.fps())
            payload_bytes.extend(r.payload_bytes for r in run.mentor.rows)
            dropped += run.op.stats.frames_dropped

        report.rows.extend(res_rows)
        stage_stats = {
            name: _mean_stdev([getattr(r, name) for r in res_rows])
            for name in STAGE_NAMES
        }
        report.resolutions.append(
            ResolutionStats(
                width=width,
                height=height,
                frames=len(res_rows),
                fps=statistics.median(fps_runs) if fps_runs else 0.0,
                fps_runs=fps_runs,
                stage_stats=stage_stats,
                closed_loop=_mean_stdev([r.closed_loop_us for r in res_rows]),
                payload_mean_bytes=(
                    statistics.fmean(payload_bytes) if payload_bytes else 0.0
                ),
                frames_dropped=dropped,
            )
        )

    report.no_data = not report.rows
    return report


# ---------------------------------------------------------------------------
# Re-projection accuracy protocol
# ---------------------------------------------------------------------------


class _ReprojectionAgent:
    """Per frame: locate the target in the received cloud, send a pointer,
    then wait until the operation console rendered that exact guidance.

    Picking from the *received* cloud (nearest 3-D point to the analytic
    target) is what couples this protocol to the codec path under test.
    """

    def __init__(self, op: OperationService, plan: List[Tuple[str, np.ndarray]],
                 settle_s: float = 2.0):
        self.op = op
        self.plan = plan
        self.settle_s = settle_s
        self.sent = 0
        self.picked: List[Tuple[str, np.ndarray]] = []
        self.done = len(plan) == 0

    def __call__(self, client, scene) -> None:
        if self.sent >= len(self.plan):
            self.done = True
            return
        name, target = self.plan[self.sent]
        diffs = scene.cloud.xyz - target[None, :]
        idx = int(np.argmin(np.einsum("ij,ij->i", diffs, diffs)))
        picked = scene.cloud.xyz[idx]
        client.send_pointer(picked)
        self.sent += 1
        self.picked.append((name, picked))
        expected_gen = self.sent  # sole feedback sender on this session
        deadline = time.monotonic() + self.settle_s
        while time.monotonic() < deadline:
            with self.op.stats.lock:
                hit = any(r.generation == expected_gen
                          for r in self.op.stats.overlay_records)
            if hit:
                return
            time.sleep(0.002)
        logger.warning("overlay for trial %d not observed in time", self.sent)


def measure_reprojection_error(
    spec: SceneSpec,
    targets: Optional[Dict[str, np.ndarray]] = None,
    path: Union[int, str] = "lossless",
    trials: int = 30,
) -> Tuple[List[AccuracyTrial], List[dict]]:
    """Closed-loop pointer protocol: marker center vs analytic pixel.

    Returns (per-trial rows, per-target stat dicts). Targets behind the
    camera are skipped and flagged.
    """
    intr = spec.intrinsics
    if targets is None:
        targets = spec.named_targets()
    usable: List[Tuple[str, np.ndarray]] = []
    stats: List[dict] = []
    for name, tgt in sorted(targets.items()):
        if tgt[2] <= 0:
            stats.append({"path": str(path), "target": name, "trials": 0,
                          "mean_px": None, "stdev_px": None, "skipped": True})
            continue
        usable.append((name, np.asarray(tgt, dtype=np.float64)))

    plan = [pair for pair in usable for _ in range(trials)]
    if not plan:
        return [], stats

    # Build the run first so the agent can hold the service reference.
    run = _LoopbackRun(spec, path, frames=len(plan) + 30)
    run.on_frame = _ReprojectionAgent(run.op, plan)
    run.run(timeout=30.0 + 0.8 * len(plan))

    with run.op.stats.lock:
        events = [e for e in run.op.stats.guidance_events if e.m == 1]
        overlay_by_gen = {}
        for rec in run.op.stats.overlay_records:
            overlay_by_gen.setdefault(rec.generation, rec)

    rows: List[AccuracyTrial] = []
    per_target: Dict[str, List[float]] = {name: [] for name, _ in usable}
    for j, (name, target) in enumerate(plan):
        if j >= len(events):
            break
        overlay = overlay_by_gen.get(events[j].generation)
        if overlay is None:
            continue
        crosshairs = [it for it in overlay.items if it.kind == "crosshair"]
        if not crosshairs:
            continue
        u, v = crosshairs[0].points[0]
        marker = (int(round(u)), int(round(v)))  # matches rasterization
        gt_u, gt_v = project_point(intr, target)
        err = float(np.hypot(marker[0] - gt_u, marker[1] - gt_v))
        trial_idx = len(per_target[name])
        per_target[name].append(err)
        rows.append(AccuracyTrial(path=str(path), target=name, trial=trial_idx,
                                  err_px=err, marker_u=marker[0],
                                  marker_v=marker[1], gt_u=gt_u, gt_v=gt_v))

    for name, _ in usable:
        errs = per_target[name]
        stats.append(
            {
                "path": str(path),
                "target": name,
                "trials": len(errs),
                "mean_px": statistics.fmean(errs) if errs else None,
                "stdev_px": (statistics.stdev(errs) if len(errs) > 1 else 0.0)
                if errs else None,
                "skipped": False,
            }
        )
    return rows, stats


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def write_report(report: BenchReport, out_dir) -> Dict[str, Path]:
    """Write latency.csv, accuracy.csv, and summary.json. Stable schema."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    latency_path = out / "latency.csv"
    accuracy_path = out / "accuracy.csv"
    summary_path = out / "summary.json"

    with open(latency_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["resolution", "rep", "seq", "capture_us", *STAGE_NAMES,
                    "closed_loop_us"])
        for r in report.rows:
            w.writerow([r.resolution, r.rep, r.seq, r.capture_us,
                        *(getattr(r, n) for n in STAGE_NAMES),
                        r.closed_loop_us])

    with open(accuracy_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "target", "trial", "err_px", "marker_u",
                    "marker_v", "gt_u", "gt_v"])
        for t in report.accuracy_rows:
            w.writerow([t.path, t.target, t.trial, f"{t.err_px:.9f}",
                        t.marker_u, t.marker_v, f"{t.gt_u:.9f}",
                        f"{t.gt_v:.9f}"])

    summary = {
        "no_data": report.no_data,
        "config": report.config,
        "failures": report.failures,
        "resolutions": [asdict(r) for r in report.resolutions],
        "accuracy": report.accuracy,
    }
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return {"latency": latency_path, "accuracy": accuracy_path,
            "summary": summary_path}


def read_latency_csv(path) -> List[dict]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        return [dict(row) for row in csv.DictReader(fh)]


def summarize_rows(rows: Sequence[StageTiming]) -> Dict[str, Dict[str, float]]:
    """Recompute per-stage statistics from raw rows (oracle for reports)."""
    return {
        name: _mean_stdev([getattr(r, name) for r in rows])
        for name in (*STAGE_NAMES, "closed_loop_us")
    }
