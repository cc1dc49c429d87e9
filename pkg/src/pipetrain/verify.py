"""Trace checkers over emitted metrics.

Every rule the scheduler is supposed to obey is re-checked here from the
log alone, independently of the engine's own bookkeeping: one-forward-
one-backward alternation, weight stashing, vertical sync, the stage-0
in-flight bound, and layer conservation across re-partitions and
recoveries. Checking is pure: the same file always yields the same report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .partition import PartitionPoints, stage_bounds


@dataclass
class CheckResult:
    name: str
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass
class VerifyReport:
    checks: list[CheckResult]

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def render(self) -> str:
        lines = []
        for c in self.checks:
            mark = "PASS" if c.ok else "FAIL"
            lines.append(f"[{mark}] {c.name}: {len(c.violations)} violation(s)")
            for v in c.violations[:10]:
                lines.append(f"    - {v}")
            if len(c.violations) > 10:
                lines.append(f"    ... and {len(c.violations) - 10} more")
        return "\n".join(lines)


def _meta(records: list[dict]) -> dict:
    for r in records:
        if r.get("event") == "META":
            return r
    raise ValueError("metrics file has no META record")


def _segments(records: list[dict]):
    """Split the trace at REPART/RECOVER boundaries (new schedule epochs)."""
    seg: list[dict] = []
    for r in records:
        if r.get("event") in ("REPART", "RECOVER"):
            yield seg
            seg = []
        else:
            seg.append(r)
    yield seg


def check_one_forward_one_backward(records: list[dict]) -> CheckResult:
    """After a stage's first backward: never two consecutive forwards, and
    two consecutive backwards only once the stage has issued its final
    forward of the segment (the drain tail)."""
    result = CheckResult("1F1B alternation")
    for seg_no, seg in enumerate(_segments(records)):
        per_stage: dict[int, list[dict]] = {}
        for r in seg:
            if r.get("event") in ("F", "B"):
                per_stage.setdefault(r["stage"], []).append(r)
        for stage, actions in sorted(per_stage.items()):
            last_f_idx = max((i for i, r in enumerate(actions) if r["event"] == "F"),
                             default=-1)
            warm = False
            prev = None
            for i, r in enumerate(actions):
                if r["event"] == "B":
                    warm = True
                if warm and prev is not None:
                    if prev == "F" and r["event"] == "F":
                        result.violations.append(
                            f"segment {seg_no} stage {stage}: consecutive forwards at "
                            f"batches ..,{r['batch']}"
                        )
                    if prev == "B" and r["event"] == "B" and i <= last_f_idx:
                        result.violations.append(
                            f"segment {seg_no} stage {stage}: consecutive backwards at "
                            f"batches ..,{r['batch']} before the drain tail"
                        )
                prev = r["event"]
    return result


def check_weight_stashing(records: list[dict]) -> CheckResult:
    """Every backward must use the version of the most recent forward of the
    same (stage, batch)."""
    result = CheckResult("weight stashing")
    last_forward_version: dict[tuple[int, int], int] = {}
    for r in records:
        if r.get("event") == "F":
            last_forward_version[(r["stage"], r["batch"])] = r["version"]
        elif r.get("event") == "B":
            key = (r["stage"], r["batch"])
            if key not in last_forward_version:
                result.violations.append(
                    f"stage {r['stage']} backward of batch {r['batch']} without a forward"
                )
            elif last_forward_version[key] != r["version"]:
                result.violations.append(
                    f"stage {r['stage']} batch {r['batch']}: forward used version "
                    f"{last_forward_version[key]} but backward used {r['version']}"
                )
    return result


def check_vertical_sync(records: list[dict]) -> CheckResult:
    """All stages must process a completed batch at one pinned sync point.

    Checked per schedule segment: a batch whose attempt was cut short by a
    recovery is re-forwarded in a later segment, and only the segment where
    its stage-0 backward lands holds its completed attempt.
    """
    result = CheckResult("vertical sync")
    for seg_no, seg in enumerate(_segments(records)):
        completed = {r["batch"] for r in seg
                     if r.get("event") == "B" and r.get("stage") == 0}
        last_pin: dict[int, dict[int, int]] = {}
        for r in seg:
            if r.get("event") == "F":
                last_pin.setdefault(r["batch"], {})[r["stage"]] = r["pin"]
        for batch in sorted(completed):
            pins = last_pin.get(batch, {})
            if not pins:
                result.violations.append(
                    f"segment {seg_no}: batch {batch} completed without forwards")
                continue
            if len(set(pins.values())) != 1:
                result.violations.append(
                    f"segment {seg_no}: batch {batch} pinned differently across stages "
                    f"{sorted(pins.items())}")
    return result


def check_inflight_bound(records: list[dict], limit: int) -> CheckResult:
    """At no instant may more than `limit` batches be forwarded at stage 0
    without a completed stage-0 backward."""
    result = CheckResult("in-flight bound")
    outstanding: set[int] = set()
    for r in records:
        if r.get("stage") != 0:
            continue
        if r.get("event") == "F":
            outstanding.add(r["batch"])
            if len(outstanding) > limit:
                result.violations.append(
                    f"t={r['t']}: {len(outstanding)} batches in flight exceeds limit {limit}"
                )
        elif r.get("event") == "B":
            outstanding.discard(r["batch"])
    return result


def check_layer_conservation(records: list[dict], total_layers: int) -> CheckResult:
    """Every partition in the trace must cover layers 0..L-1 disjointly."""
    result = CheckResult("layer conservation")

    def validate(points_list, n_stages, where):
        try:
            points = PartitionPoints(tuple(points_list))
        except ValueError as exc:
            result.violations.append(f"{where}: invalid points {points_list}: {exc}")
            return
        if points.n_stages != n_stages:
            result.violations.append(
                f"{where}: {points.n_stages} stages implied but roster has {n_stages}"
            )
            return
        covered = []
        try:
            for s in range(points.n_stages):
                a, b = stage_bounds(points, s, total_layers)
                covered.extend(range(a, b + 1))
        except ValueError as exc:
            result.violations.append(f"{where}: {exc}")
            return
        if covered != list(range(total_layers)):
            result.violations.append(f"{where}: layers covered {covered} != 0..{total_layers - 1}")

    meta = _meta(records)
    validate(meta["points"], meta["n_stages"], "initial partition")
    for i, r in enumerate(records):
        if r.get("event") in ("REPART", "RECOVER"):
            validate(r["points"], r["n_stages"], f"record {i} ({r['event']})")
    return result


def verify_records(records: list[dict]) -> VerifyReport:
    meta = _meta(records)
    checks = [
        check_one_forward_one_backward(records),
        check_weight_stashing(records),
        check_vertical_sync(records),
        check_inflight_bound(records, meta["in_flight_limit"]),
        check_layer_conservation(records, meta["total_layers"]),
    ]
    return VerifyReport(checks)
