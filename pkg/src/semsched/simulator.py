"""Deterministic discrete-event simulator of a homogeneous GPU cluster.

Time is integer seconds. Work is accounted exactly with fractions: a job's
effective progress accrues at ``current_rate`` work-seconds per wall-second
(1.0 exclusive, the ground-truth retention factor while packed). Completion
and failure events land on the next integer second after the corresponding
work milestone; the sub-second remainder is idle, so attained work plus
checkpoint-lost work equals the milestone exactly.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from fractions import Fraction
from math import ceil
from typing import Optional

from .core import ClusterSpec, JobRecord, JobSpec, JobTruth, SimConfig, compute_report

# Deterministic processing order for same-time events.
EVENT_KINDS = (
    "ARRIVAL",
    "PROFILE_DONE",
    "STEP_PROGRESS_CHECK",
    "FAILURE",
    "JOB_DONE",
    "EVICTION_CHECK",
    "RESTART_READY",
)
_KIND_ORDER = {kind: i for i, kind in enumerate(EVENT_KINDS)}

# Job states; queue-bucket states accrue queue_s, the rest accrue run_s.
QUEUE_STATES = ("QUEUED", "WAIT_PROFILE", "MANUAL_WAIT")
RUN_STATES = ("PROFILING", "RUNNING", "AUTO_RECOVERY")


def observe_profile(truth: JobTruth, cfg: SimConfig) -> float:
    """Time-weighted SM utilization over the profiling window [0, T_prof].

    Profiling that overlaps the warmup phase is systematically biased low.
    """
    t_prof = cfg.profiling_seconds
    if t_prof <= 0:
        return truth.sm_util_steady
    warm = min(truth.warmup_seconds, t_prof)
    return (warm * truth.sm_util_warmup + (t_prof - warm) * truth.sm_util_steady) / t_prof


@dataclass
class SimJob:
    spec: JobSpec
    truth: JobTruth
    state: str = "PENDING"
    state_since: int = 0
    queue_s: int = 0
    run_s: int = 0
    restarts: int = 0
    evictions: int = 0
    final_status: Optional[str] = None
    completion_time: Optional[int] = None

    # work accounting
    work: Fraction = Fraction(0)
    checkpoint: Fraction = Fraction(0)
    lost_work: Fraction = Fraction(0)
    rate: Fraction = Fraction(1)
    last_update: int = 0
    failures_consumed: int = 0
    epoch: int = 0

    # placement
    owned_gpus: int = 0
    packed_with: Optional[str] = None
    never_pack: bool = False
    observed_util: Optional[float] = None
    logs_detected: bool = False
    eviction_checked: bool = False
    attained_gpu_seconds: Fraction = Fraction(0)
    total_performed: Fraction = Fraction(0)
    estimate_duration: Optional[float] = None
    estimate_util: Optional[float] = None
    estimate_source: Optional[str] = None

    @property
    def job_id(self) -> str:
        return self.spec.job_id

    def next_milestone(self):
        """(work-mark, kind) of the next failure or terminal completion."""
        events = self.truth.failure_events
        if self.failures_consumed < len(events):
            offset, kind = events[self.failures_consumed]
            return Fraction(offset), ("FAILURE", kind)
        return Fraction(self.truth.true_duration), ("DONE", None)


class Simulator:
    """Single-threaded deterministic event loop."""

    def __init__(self, jobs, cluster: ClusterSpec, policy, cfg: SimConfig):
        self.cluster = cluster
        self.policy = policy
        self.cfg = cfg
        self.jobs = {}
        self.trace_order = []
        self.rejected = []
        self.now = 0
        self._heap = []
        self._seq = 0
        self.usable_gpus = cluster.total_gpus
        if policy.profiles:
            self.usable_gpus -= cluster.gpus_per_node
            if self.usable_gpus < 1:
                raise ValueError("cluster too small to reserve a profiling node")
        self.free_gpus = self.usable_gpus
        self.profile_queue = []  # (enqueue_time, job_id)
        self.profiling_job: Optional[str] = None
        self.audit = []

        for spec, truth in jobs:
            job = SimJob(spec=spec, truth=truth)
            if spec.num_gpus > self.usable_gpus:
                self.rejected.append(spec.job_id)
                continue
            self.jobs[spec.job_id] = job
            self.trace_order.append(spec.job_id)
            job.logs_detected = self._detect_logs(spec.job_id, truth)
            self.push(spec.submit_time, "ARRIVAL", spec.job_id)

    # -- stochastic trace-prep stage (the only consumer of the seed aside
    #    from policy estimators) -------------------------------------------

    def _detect_logs(self, job_id: str, truth: JobTruth) -> bool:
        if not truth.logs_progress:
            return False
        if self.cfg.detection_rate >= 1.0:
            return True
        u = random.Random(f"{self.cfg.rng_seed}:detect:{job_id}").random()
        return u < self.cfg.detection_rate

    # -- event plumbing ----------------------------------------------------

    def push(self, time: int, kind: str, job_id: str, epoch: Optional[int] = None,
             payload=None):
        self._seq += 1
        heapq.heappush(
            self._heap, (time, _KIND_ORDER[kind], job_id, self._seq, kind, epoch, payload)
        )

    def log_event(self, kind: str, job_id: str, note: str = ""):
        self.audit.append((self.now, kind, job_id, note))

    # -- per-job time/work bookkeeping --------------------------------------

    def _touch(self, job: SimJob):
        """Accrue queue/run seconds and work up to the current time."""
        dt = self.now - job.state_since
        if dt:
            if job.state in QUEUE_STATES:
                job.queue_s += dt
            elif job.state in RUN_STATES:
                job.run_s += dt
            job.state_since = self.now
        if job.state == "RUNNING":
            wall = self.now - job.last_update
            if wall:
                limit, _ = job.next_milestone()
                delta = job.rate * wall
                gained = min(delta, limit - job.work)
                job.work += gained
                job.total_performed += gained
                job.attained_gpu_seconds += Fraction(job.spec.num_gpus) * wall
                interval = job.work // self.cfg.checkpoint_interval_s
                job.checkpoint = max(job.checkpoint, interval * self.cfg.checkpoint_interval_s)
        job.last_update = self.now
        job.state_since = self.now

    def _set_state(self, job: SimJob, state: str):
        self._touch(job)
        job.state = state
        job.state_since = self.now
        job.last_update = self.now

    def _schedule_milestone(self, job: SimJob):
        """Schedule the next FAILURE/JOB_DONE event for a running job."""
        job.epoch += 1
        limit, (kind, _fk) = job.next_milestone()
        remaining = limit - job.work
        dt = max(1, ceil(remaining / job.rate)) if remaining > 0 else 1
        event = "FAILURE" if kind == "FAILURE" else "JOB_DONE"
        self.push(self.now + dt, event, job.job_id, epoch=job.epoch)

    # -- placement ----------------------------------------------------------

    def _start_exclusive(self, job: SimJob):
        self.free_gpus -= job.spec.num_gpus
        job.owned_gpus = job.spec.num_gpus
        job.rate = Fraction(1)
        self._set_state(job, "RUNNING")
        self._schedule_milestone(job)
        self.log_event("START", job.job_id)

    def _apply_packing(self, host: SimJob, guest: SimJob):
        """Co-locate guest onto host's GPUs; both slow to their retention."""
        if host.packed_with is not None or guest.packed_with is not None:
            raise RuntimeError("slot already packed")
        host.packed_with = guest.job_id
        guest.packed_with = host.job_id
        guest.owned_gpus = 0
        self._touch(host)
        host.rate = host.truth.retention_for(guest.truth.sm_util_steady)
        guest.rate = guest.truth.retention_for(host.truth.sm_util_steady)
        self._set_state(guest, "RUNNING")
        self._schedule_milestone(host)
        self._schedule_milestone(guest)
        self.log_event("PACK", guest.job_id, f"onto {host.job_id}")
        if self.policy.eviction_checks and not host.eviction_checked:
            host.eviction_checked = True
            steps = self.policy.tracker_cfg.min_steps_after_pack
            step_time = self.cfg.nominal_step_time_s / float(host.rate)
            self.push(
                self.now + max(1, ceil(steps * step_time)),
                "EVICTION_CHECK",
                host.job_id,
                payload=guest.job_id,
            )

    def _unpack(self, survivor: SimJob):
        survivor.packed_with = None
        survivor.eviction_checked = False
        self._touch(survivor)
        survivor.rate = Fraction(1)
        if survivor.state == "RUNNING":
            self._schedule_milestone(survivor)

    def _release(self, job: SimJob):
        """Free job's GPUs, transferring ownership to a packed partner."""
        partner = self.jobs.get(job.packed_with) if job.packed_with else None
        if partner is not None:
            transferred = min(partner.spec.num_gpus, job.owned_gpus)
            if job.owned_gpus:  # job was the host
                partner.owned_gpus = transferred
                self.free_gpus += job.owned_gpus - transferred
            self._unpack(partner)
        else:
            self.free_gpus += job.owned_gpus
        job.owned_gpus = 0
        job.packed_with = None

    # -- terminalization -----------------------------------------------------

    def _finish(self, job: SimJob, status: str):
        self._touch(job)
        self._release(job)
        job.final_status = status
        job.completion_time = self.now
        self._set_state(job, "TERMINAL")
        self.log_event("TERMINAL", job.job_id, status)
        self.policy.on_terminal(job, self)

    # -- event handlers -------------------------------------------------------

    def _on_arrival(self, job: SimJob):
        self._set_state(job, "QUEUED")
        self.policy.on_arrival(job, self)
        if self.policy.profiles and job.observed_util is None \
                and self.policy.wants_profile(job, self):
            job.state = "WAIT_PROFILE"
            self.profile_queue.append((self.now, job.job_id))
        self.log_event("ARRIVAL", job.job_id)

    def _on_profile_done(self, job: SimJob):
        job.observed_util = observe_profile(job.truth, self.cfg)
        self.profiling_job = None
        self._set_state(job, "QUEUED")
        self.log_event("PROFILE_DONE", job.job_id, f"util={job.observed_util:.1f}")

    def _on_failure(self, job: SimJob):
        if job.state != "RUNNING":
            return
        self._touch(job)
        _offset, (kind_tag, fkind) = job.next_milestone()
        job.failures_consumed += 1
        assert kind_tag == "FAILURE" and fkind is not None
        resumable = job.truth.final_status == "COMPLETED"
        handled_infra = self.policy.classify_failure_kind(fkind, self) == "INFRA"
        self.log_event("FAILURE", job.job_id, fkind.category)

        if fkind.category != "INFRA" or not resumable:
            self._finish(job, "FAILED")
            return

        lost = job.work - job.checkpoint
        job.lost_work += lost
        job.work = job.checkpoint
        job.restarts += 1
        if self.policy.failure_handling and handled_infra:
            # Automated path: diagnose, isolate, provision, restart from the
            # checkpoint; resources stay assigned while recovering.
            self._set_state(job, "AUTO_RECOVERY")
            job.epoch += 1
            self.push(
                self.now + self.cfg.auto_recovery_delay_s,
                "RESTART_READY",
                job.job_id,
                epoch=job.epoch,
            )
        else:
            # Manual triage: the job leaves the cluster and is resubmitted.
            self._release(job)
            job.epoch += 1
            self._set_state(job, "MANUAL_WAIT")
            self.push(
                self.now + self.cfg.manual_recovery_delay_s,
                "ARRIVAL",
                job.job_id,
                epoch=job.epoch,
            )

    def _on_restart_ready(self, job: SimJob):
        if job.state != "AUTO_RECOVERY":
            return
        self._set_state(job, "RUNNING")
        self._schedule_milestone(job)
        self.log_event("RESTART", job.job_id)

    def _on_job_done(self, job: SimJob):
        if job.state != "RUNNING":
            return
        self._touch(job)
        status = job.truth.final_status if job.truth.final_status != "FAILED" else "FAILED"
        self._finish(job, status)

    def _on_eviction_check(self, host_id: str, guest_id: str):
        host = self.jobs.get(host_id)
        guest = self.jobs.get(guest_id)
        if host is None or guest is None or host.packed_with != guest_id:
            return
        if host.state != "RUNNING" or guest.state != "RUNNING":
            return
        decision = self.policy.eviction_decision(host, guest, self)
        self.log_event("EVICTION_CHECK", host_id, decision)
        if decision != "EVICT":
            return
        # Evict the later-packed guest: it loses progress since its last
        # checkpoint and can never be packed again.
        self._touch(guest)
        lost = guest.work - guest.checkpoint
        guest.lost_work += lost
        guest.work = guest.checkpoint
        guest.evictions += 1
        guest.never_pack = True
        guest.epoch += 1
        self._release(guest)
        self._set_state(guest, "QUEUED")
        self.log_event("EVICT", guest.job_id)

    # -- scheduling pass -------------------------------------------------------

    def _schedule_pass(self):
        # 1. Feed the reserved profiling node, FIFO.
        if self.policy.profiles:
            self.profile_queue.sort()
            while self.profiling_job is None and self.profile_queue:
                _t, job_id = self.profile_queue.pop(0)
                job = self.jobs[job_id]
                if job.state != "WAIT_PROFILE":
                    continue
                self.profiling_job = job_id
                self._set_state(job, "PROFILING")
                self.push(self.now + self.cfg.profiling_seconds, "PROFILE_DONE", job_id)
                break

        # 2. Preemption for preemptive policies.
        if self.policy.preemptive:
            self._preempt_pass()

        # 3. Place queued jobs in policy order; strict order, no backfill.
        queued = [j for j in self.jobs.values() if j.state == "QUEUED"]
        for job in self.policy.order_queue(queued, self):
            if job.spec.num_gpus <= self.free_gpus:
                self._start_exclusive(job)
                continue
            host = self._find_pack_host(job) if self.policy.packs else None
            if host is not None:
                self._apply_packing(host, job)
                continue
            break

    def _find_pack_host(self, job: SimJob) -> Optional[SimJob]:
        if job.never_pack:
            return None
        candidates = []
        for other in self.jobs.values():
            if (
                other.state == "RUNNING"
                and other.packed_with is None
                and other.owned_gpus >= job.spec.num_gpus
                and self.policy.can_pack(other, job, self)
            ):
                candidates.append(other)
        if not candidates:
            return None
        candidates.sort(key=lambda j: (self.policy.pack_host_key(j, self), j.job_id))
        return candidates[0]

    def _preempt_pass(self):
        threshold = self.policy.promotion_threshold
        queued_high = [
            j for j in self.jobs.values()
            if j.state == "QUEUED" and j.attained_gpu_seconds < threshold
        ]
        if not queued_high:
            return
        queued_high.sort(key=lambda j: (j.spec.submit_time, j.job_id))
        needed = sum(j.spec.num_gpus for j in queued_high) - self.free_gpus
        if needed <= 0:
            return
        running_low = [
            j for j in self.jobs.values()
            if j.state == "RUNNING" and j.packed_with is None
            and j.attained_gpu_seconds >= threshold
        ]
        running_low.sort(key=lambda j: (-j.attained_gpu_seconds, j.job_id))
        for victim in running_low:
            if needed <= 0:
                break
            self._touch(victim)
            # Checkpoint-safe preemption: progress is saved at the preemption
            # point and the job re-queues immediately.
            victim.checkpoint = victim.work
            victim.restarts += 1
            victim.epoch += 1
            self._release(victim)
            self._set_state(victim, "QUEUED")
            self.log_event("PREEMPT", victim.job_id)
            needed -= victim.spec.num_gpus

    # -- main loop ---------------------------------------------------------------

    def run(self):
        while self._heap:
            time, _ko, _jid, _seq, kind, epoch, payload = heapq.heappop(self._heap)
            self.now = time
            job = self.jobs.get(_jid)
            if job is None:
                continue
            if epoch is not None and epoch != job.epoch:
                continue  # stale timing event
            if kind == "ARRIVAL":
                self._on_arrival(job)
            elif kind == "PROFILE_DONE":
                self._on_profile_done(job)
            elif kind == "FAILURE":
                self._on_failure(job)
            elif kind == "JOB_DONE":
                self._on_job_done(job)
            elif kind == "EVICTION_CHECK":
                self._on_eviction_check(_jid, payload)
            elif kind == "RESTART_READY":
                self._on_restart_ready(job)
            # Coalesce: only reschedule when no same-time events remain.
            if not self._heap or self._heap[0][0] != self.now:
                self._schedule_pass()

        records = []
        for job_id in self.trace_order:
            job = self.jobs[job_id]
            if job.final_status is None:
                raise RuntimeError(f"job {job_id} never reached a terminal state")
            records.append(
                JobRecord(
                    job_id=job_id,
                    submit_time=job.spec.submit_time,
                    queue_s=job.queue_s,
                    run_s=job.run_s,
                    restarts=job.restarts,
                    evictions=job.evictions,
                    final_status=job.final_status,
                )
            )
        return records

    def verify_work_conservation(self):
        """Exact accounting: all work ever performed splits into surviving work
        plus checkpoint-lost work, and completed jobs' surviving work equals
        their full required duration."""
        for job in self.jobs.values():
            assert job.total_performed == job.work + job.lost_work, (
                job.job_id, job.total_performed, job.work, job.lost_work
            )
            if job.final_status == "COMPLETED":
                assert job.work == Fraction(job.truth.true_duration), (
                    job.job_id, job.work, job.truth.true_duration
                )


def run_simulation(jobs, cluster: ClusterSpec, policy, cfg: SimConfig):
    """Run the full trace to completion; returns (SimReport, rejected_job_ids)."""
    sim = Simulator(jobs, cluster, policy, cfg)
    records = sim.run()
    sim.verify_work_conservation()
    if not records and sim.rejected:
        raise ValueError("all jobs were rejected (cluster too small)")
    return compute_report(records), sim.rejected
