"""Full pipeline: tracking, per-keyframe mapping and the loop back end.

Frames are tracked against a reference keyframe.  Each frame stores its
reference id and the relative pose ``T_kf = X_k^-1 X_f``; world poses are
recomputed from the latest keyframe poses, so pose-graph corrections carry
over to every frame.

In deterministic mode mapping and back-end work run synchronously right
after a keyframe is created.  In parallel mode they run on worker threads
and their results (a fused keyframe snapshot, a new set of keyframe poses)
are adopted only at frame boundaries.
"""

from __future__ import annotations

import copy
import logging
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .config import RunConfig
from .image import Frame
from .loop import (
    LoopCandidate, PlaceDescriptor, compute_descriptor, detect_loop_candidate, global_descriptor,
    map_reuse_decision, refine_alignment_with_tracking, reuse_candidates, verify_and_align,
)
from .mapping import Keyframe, fuse_keyframe, make_keyframe, should_create_keyframe, triangulate_multiview
from .posegraph import PoseGraph, optimize_pose_graph
from .se3 import Pose, exp_se3
from .tracking import TrackingLostError, TrackingState, track_frame

log = logging.getLogger(__name__)


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    ref_id: int
    T_kf: Pose
    event: str = ""


@dataclass
class SlamResult:
    status: str  # "ok" or "lost"
    records: list[FrameRecord]
    keyframes: dict[int, Keyframe]
    graph: PoseGraph
    loops: list[LoopCandidate] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)
    timing_ms: list[float] = field(default_factory=list)
    message: str = ""
    # keyframe poses just before and just after each adopted loop closure
    loop_history: list[tuple[dict[int, Pose], dict[int, Pose]]] = field(default_factory=list)

    @property
    def timestamps(self) -> list[float]:
        return [r.timestamp for r in self.records]

    @property
    def poses(self) -> list[Pose]:
        return [self.keyframes[r.ref_id].pose.compose(r.T_kf) for r in self.records]

    @property
    def keyframe_list(self) -> list[Keyframe]:
        return [self.keyframes[k] for k in sorted(self.keyframes)]

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.timing_ms)) if self.timing_ms else 0.0


class SlamSystem:
    """Incremental SLAM over a stream of :class:`Frame` objects."""

    def __init__(self, cfg: RunConfig, loop_closure: bool | None = None,
                 on_diagnostic: Callable[[dict], None] | None = None):
        self.cfg = cfg
        self.loop_closure = cfg.backend.loop_closure if loop_closure is None else loop_closure
        self.map_reuse = cfg.backend.map_reuse and self.loop_closure
        self.on_diagnostic = on_diagnostic
        self.keyframes: dict[int, Keyframe] = {}
        self.descriptors: dict[int, PlaceDescriptor] = {}
        self.graph = PoseGraph()
        self.records: list[FrameRecord] = []
        self.views: dict[int, list[tuple[Frame, Pose]]] = {}
        self.mapped: set[int] = set()
        self.loops: list[LoopCandidate] = []
        self.diagnostics: list[dict] = []
        self.timing_ms: list[float] = []
        self.loop_history: list[tuple[dict[int, Pose], dict[int, Pose]]] = []
        self.ref_id = -1
        self.velocity = Pose.identity()  # X_prev^-1 X_cur of the last two frames
        self.a, self.b = 1.0, 0.0
        self.sigma_ph: tuple[float, ...] | None = None
        self.rng = np.random.default_rng(cfg.system.seed)
        self.status = "ok"
        self.message = ""
        self._executor: ThreadPoolExecutor | None = None
        self._map_jobs: list[Future] = []
        self._backend_jobs: list[Future] = []
        if not cfg.system.deterministic:
            self._executor = ThreadPoolExecutor(max_workers=2)

    # -- helpers -----------------------------------------------------------
    def frame_pose(self, rec: FrameRecord) -> Pose:
        return self.keyframes[rec.ref_id].pose.compose(rec.T_kf)

    def _emit(self, diag: dict) -> None:
        self.diagnostics.append(diag)
        if self.on_diagnostic is not None:
            self.on_diagnostic(diag)

    def _add_keyframe(self, frame: Frame, pose: Pose) -> Keyframe:
        kid = len(self.keyframes)
        if kid > 0 and any(self.cfg.system.keyframe_drift):
            pose = pose.compose(exp_se3(np.asarray(self.cfg.system.keyframe_drift, dtype=np.float64)))
        kf = make_keyframe(kid, frame, pose, self.cfg.edges)
        self.keyframes[kid] = kf
        self.descriptors[kid] = compute_descriptor(frame, self.cfg.loop)
        self.graph.add_node(kid, pose)
        if kid > 0:
            prev = self.keyframes[kid - 1]
            self.graph.add_edge(kid - 1, kid, prev.pose.inverse().compose(pose), "odometry")
        self.views[kid] = []
        return kf

    # -- mapping -----------------------------------------------------------
    def _map_job(self, kf: Keyframe, views: list[tuple[Frame, Pose]]) -> Keyframe:
        # views hold T_kf relative poses; the keyframe snapshot supplies the frame of reference
        world = [(fr, kf.pose.compose(T)) for fr, T in views]
        res = triangulate_multiview(kf, world, self.cfg.mapping)
        fused = fuse_keyframe(kf, res, self.cfg.edges)
        fused.meta["multiview_accepted"] = int(res.accepted.sum())
        fused.meta["multiview_searched"] = len(res.rho)
        return fused

    def _schedule_mapping(self, kid: int) -> None:
        if kid in self.mapped or kid not in self.keyframes:
            return
        self.mapped.add(kid)
        views = self.views.pop(kid, [])
        kf = self.keyframes[kid]
        if self._executor is None:
            self._adopt_keyframe(self._map_job(kf, views))
        else:
            self._map_jobs.append(self._executor.submit(self._map_job, kf, views))

    def _adopt_keyframe(self, fused: Keyframe) -> None:
        current = self.keyframes[fused.id]
        self.keyframes[fused.id] = fused.with_pose(current.pose)

    # -- back end ----------------------------------------------------------
    def _backend_job(self, kid: int, keyframes: dict[int, Keyframe], graph: PoseGraph, seed: int,
                     sigma_ph: tuple[float, ...] | None = None):
        cfg = self.cfg
        current = keyframes[kid]
        cand = detect_loop_candidate(current, list(keyframes.values()), self.descriptors, cfg.loop)
        if cand is None:
            return None
        match = keyframes[cand.match_id]
        intr = current.frame.intrinsics[current.frame.finest]
        cand = verify_and_align(cand, self.descriptors[kid], self.descriptors[cand.match_id], intr, cfg.loop,
                                np.random.default_rng([seed, kid]))
        if not cand.accepted:
            return cand, None
        # direct refinement of the feature-based estimate: X_q = X_m T_qm^-1
        guess = match.pose.compose(cand.transform.inverse())
        refined = refine_alignment_with_tracking(current.frame, match, guess, cfg.tracking, sigma_ph)
        if refined is not None:
            cand.transform = refined.inverse().compose(match.pose)
        graph.add_edge(kid, cand.match_id, cand.transform, "loop")
        report = optimize_pose_graph(graph, cfg.backend.max_iterations, cfg.backend.min_decrease)
        return cand, (dict(graph.nodes), report)

    def _schedule_backend(self, kid: int) -> None:
        if not self.loop_closure:
            return
        snapshot = dict(self.keyframes)
        graph = copy.deepcopy(self.graph)
        if self._executor is None:
            self._adopt_backend(self._backend_job(kid, snapshot, graph, self.cfg.system.seed, self.sigma_ph))
        else:
            self._backend_jobs.append(self._executor.submit(self._backend_job, kid, snapshot, graph, self.cfg.system.seed,
                                                       self.sigma_ph))

    def _adopt_backend(self, result) -> None:
        if result is None:
            return
        cand, opt = result
        self.loops.append(cand)
        if opt is None:
            return
        nodes, report = opt
        self.graph.add_edge(cand.query_id, cand.match_id, cand.transform, "loop")
        # keyframes created after the snapshot follow the newest optimized one rigidly
        last = max(nodes)
        correction = nodes[last].compose(self.graph.nodes[last].inverse())
        before = dict(self.graph.nodes)
        for kid in sorted(self.keyframes):
            new = nodes[kid] if kid in nodes else correction.compose(self.graph.nodes[kid])
            self.graph.nodes[kid] = new
            self.keyframes[kid] = self.keyframes[kid].with_pose(new)
        self.loop_history.append((before, dict(self.graph.nodes)))
        self._emit({"event": "loop_closed", "query": cand.query_id, "match": cand.match_id,
                    "inliers": cand.n_inliers, "initial_cost": report.initial_cost,
                    "final_cost": report.final_cost, "iterations": report.iterations})

    def _adopt_finished(self, wait: bool = False) -> None:
        for jobs, adopt in ((self._map_jobs, self._adopt_keyframe), (self._backend_jobs, self._adopt_backend)):
            pending = []
            for job in jobs:
                if wait or job.done():
                    adopt(job.result())
                else:
                    pending.append(job)
            jobs[:] = pending

    # -- tracking ----------------------------------------------------------
    def process(self, frame: Frame) -> FrameRecord:
        """Track one frame; raises :class:`TrackingLostError` on failure."""
        t0 = time.perf_counter()
        self._adopt_finished()
        if not self.keyframes:
            self._add_keyframe(frame, Pose.identity())
            self.ref_id = 0
            rec = FrameRecord(frame.index, frame.timestamp, 0, Pose.identity(), "keyframe")
            self.records.append(rec)
            self._finish_frame(rec, t0, {})
            return rec
        prev = self.records[-1]
        prev_pose = self.frame_pose(prev)
        if len(self.records) == 1 and self.cfg.system.prior_jitter > 0:
            init = prev_pose.compose(exp_se3(self.rng.normal(0.0, self.cfg.system.prior_jitter, 6)))
        else:
            init = prev_pose.compose(self.velocity)
        ref = self.keyframes[self.ref_id]
        try:
            state, stats = track_frame(frame, ref, TrackingState(init, self.a, self.b, ref.id), self.cfg.tracking,
                                       self.sigma_ph)
        except TrackingLostError as exc:
            self.status, self.message = "lost", str(exc)
            diag = {"index": frame.index, "timestamp": frame.timestamp, "event": "lost", "message": str(exc)}
            if exc.stats is not None:
                diag.update(exc.stats.as_dict())
            self._emit(diag)
            raise
        self.sigma_ph = stats.sigma_ph
        self.a, self.b = state.a, state.b
        pose = state.pose
        self.velocity = prev_pose.inverse().compose(pose)
        T_kf = ref.pose.inverse().compose(pose)
        if self.ref_id in self.views and len(self.views[self.ref_id]) < self.cfg.backend.max_views_stored:
            self.views[self.ref_id].append((frame, T_kf))
        create, overlap = should_create_keyframe(pose, ref, self.cfg.mapping)
        event = ""
        rec = FrameRecord(frame.index, frame.timestamp, self.ref_id, T_kf)
        if create:
            decision = None
            if self.map_reuse:
                cands = reuse_candidates(global_descriptor(frame.gray[frame.finest], self.cfg.loop.blur_sigma,
                                                           (self.cfg.loop.global_width, self.cfg.loop.global_height)),
                                         list(self.keyframes.values()), self.descriptors, {self.ref_id}, self.cfg.loop)
                if cands:
                    decision = map_reuse_decision(frame, pose, cands, self.cfg.tracking, self.cfg.loop, True,
                                                  self.sigma_ph)
            old_ref = self.ref_id
            if decision is not None and decision.action == "reuse":
                self.ref_id = decision.keyframe_id
                new_ref = self.keyframes[self.ref_id]
                rec = FrameRecord(frame.index, frame.timestamp, self.ref_id, new_ref.pose.inverse().compose(decision.state.pose))
                self.velocity = prev_pose.inverse().compose(decision.state.pose)
                event = f"reuse:{self.ref_id}"
                self._schedule_mapping(old_ref)
            else:
                kf = self._add_keyframe(frame, pose)
                self.ref_id = kf.id
                rec = FrameRecord(frame.index, frame.timestamp, kf.id, Pose.identity())
                event = "keyframe"
                self._schedule_mapping(old_ref)
                self._schedule_backend(kf.id)
        rec.event = event
        self.records.append(rec)
        diag = {"overlap": overlap, "a": state.a, "b": state.b, **stats.as_dict()}
        self._finish_frame(rec, t0, diag)
        return rec

    def _finish_frame(self, rec: FrameRecord, t0: float, diag: dict) -> None:
        ms = 1000.0 * (time.perf_counter() - t0)
        self.timing_ms.append(ms)
        self._emit({"index": rec.index, "timestamp": rec.timestamp, "ref": rec.ref_id, "event": rec.event,
                    "time_ms": ms, **diag})

    def finish(self) -> SlamResult:
        """Map the remaining keyframes, wait for workers and return the result."""
        self._adopt_finished(wait=True)
        for kid in sorted(self.keyframes):
            if kid not in self.mapped and self.views.get(kid):
                self._schedule_mapping(kid)
        self._adopt_finished(wait=True)
        if self._executor is not None:
            self._executor.shutdown(wait=True)
        return SlamResult(self.status, self.records, dict(self.keyframes), self.graph, self.loops,
                          self.diagnostics, self.timing_ms, self.message, self.loop_history)


def run_slam(frames: Iterable[Frame], cfg: RunConfig, loop_closure: bool | None = None,
             on_diagnostic: Callable[[dict], None] | None = None) -> SlamResult:
    """Process all frames; stops at the first tracking loss with status ``lost``."""
    system = SlamSystem(cfg, loop_closure, on_diagnostic)
    try:
        for frame in frames:
            system.process(frame)
    except TrackingLostError:
        log.warning("tracking lost: %s", system.message)
    return system.finish()
