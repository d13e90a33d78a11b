from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from vbcls.errors import FileSystemError

HISTORY_COLUMNS = ("epoch", "L1", "L2", "L_CE1", "L_CE2", "L_yhat", "total_f", "train_acc")


@dataclass
class TargetResult:
    target: str
    target_index: int
    sources: list[str]
    seeds: list[int]
    accuracies: list[float]
    mean: float | None
    sd: float | None          # population standard deviation
    target_priors: list[list[float]] = field(default_factory=list)
    kl_pooled_to_target: float = 0.0
    failures: list[dict] = field(default_factory=list)


@dataclass
class RunReport:
    variant: str
    targets: list[TargetResult]
    histories: dict[str, list[dict]]
    label_shift_kl: dict[str, float]
    config: dict
    # wall-clock time is kept out of report.json so identical runs give identical files
    duration_s: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("duration_s")
        return d

    @classmethod
    def from_dict(cls, data: dict, duration_s: float = 0.0) -> RunReport:
        targets = [TargetResult(**t) for t in data["targets"]]
        rest = {f.name: data[f.name] for f in fields(cls) if f.name not in ("targets", "duration_s")}
        return cls(targets=targets, duration_s=duration_s, **rest)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def summarize(accuracies) -> tuple[float, float]:
    """Mean and population standard deviation."""
    n = len(accuracies)
    mean = sum(accuracies) / n
    return mean, (sum((a - mean) ** 2 for a in accuracies) / n) ** 0.5


def _write(path: Path, writer) -> None:
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer(fh)
    except OSError as exc:
        raise FileSystemError(f"cannot write {path}: {exc.strerror}", path=str(path)) from exc


def emit_report(report: RunReport, out_dir) -> None:
    """Write report.json, summary.csv, one history CSV per (target, seed) and timing.json."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FileSystemError(f"cannot create {out}: {exc.strerror}", path=str(out)) from exc

    _write(out / "report.json", lambda fh: fh.write(report.to_json() + "\n"))

    def summary(fh):
        w = csv.writer(fh)
        w.writerow(["target", "variant", "mean", "sd", "n_seeds"])
        for t in report.targets:
            w.writerow([t.target, report.variant, t.mean, t.sd, len(t.accuracies)])

    _write(out / "summary.csv", summary)

    for key, rows in report.histories.items():
        def history(fh, rows=rows):
            w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
            w.writeheader()
            w.writerows(rows)

        _write(out / f"history_{key}.csv", history)

    _write(out / "timing.json", lambda fh: json.dump({"duration_s": report.duration_s}, fh))


def read_report(out_dir) -> RunReport:
    out = Path(out_dir)
    try:
        data = json.loads((out / "report.json").read_text(encoding="utf-8"))
    except OSError as exc:
        raise FileSystemError(f"cannot read {out / 'report.json'}: {exc.strerror}",
                              path=str(out / "report.json")) from exc
    duration = 0.0
    timing = out / "timing.json"
    if timing.exists():
        duration = json.loads(timing.read_text(encoding="utf-8")).get("duration_s", 0.0)
    return RunReport.from_dict(data, duration)
