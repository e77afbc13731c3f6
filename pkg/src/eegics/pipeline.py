"""Two-stage teacher/student channel selection under leave-one-subject-out."""

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__, _kernels, selection
from .data import accuracy, loso_splits, restrict_channels
from .model import build_student, build_teacher
from .nn import train
from .selection import NoConfidentSamples, select_top_n

log = logging.getLogger(__name__)

DEFAULT_SWEEP = (5, 10, 15, 20, 25, 30)


class PipelineError(RuntimeError):
    pass


def derive_seed(*parts):
    """Stable 32-bit seed from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def teacher_seed(cfg, subject):
    return derive_seed(cfg.seed, subject, 0)


def student_seed(cfg, subject, n):
    return derive_seed(cfg.seed, subject, 1, n)


@dataclass
class StudentRecord:
    n: int
    selected: list
    selected_names: list
    accuracy: float
    planted_recall: float = None
    checksum: str = None


@dataclass
class FoldRecord:
    subject: int
    n_train: int
    n_test: int
    teacher_accuracy: float
    teacher_checksum: str
    status: str = "ok"
    diagnostic: str = None
    n_voters: int = 0
    tau_used: float = None
    ranking: list = None
    channel_totals: list = None
    students: list = field(default_factory=list)
    teacher_loss: list = None

    def student(self, n):
        for s in self.students:
            if s.n == n:
                return s
        return None


def planted_recall(selected, planted):
    if not planted:
        return None
    return len(set(selected) & set(planted)) / len(planted)


def run_ics_fold(dataset, split, cfg, n_values=None, keep_models=False):
    """Teacher on all channels, CAM vote on training samples, one student per N.

    Only ``split.train`` samples reach the confidence filter, CAMs and vote.
    Returns the fold record, plus ``{"teacher": ..., n: student}`` models when
    ``keep_models`` is set.
    """
    n_values = list(n_values or [cfg.n_channels])
    c = dataset.n_channels
    for n in n_values:
        if not 1 <= n <= c:
            raise ValueError(f"N={n} outside [1, {c}]")
    train_ds = dataset.subset(split.train)
    test_ds = dataset.subset(split.test)
    spec = build_teacher(c, dataset.n_timepoints, cfg.arch)
    t0 = time.perf_counter()
    teacher = train(spec, train_ds, cfg.replace(seed=teacher_seed(cfg, split.subject)))
    teacher_acc = accuracy(teacher.model.predict(test_ds.X), test_ds.labels)
    log.info("subject %d: teacher acc %.4f (%.1fs)", split.subject, teacher_acc,
             time.perf_counter() - t0)
    rec = FoldRecord(split.subject, len(split.train), len(split.test), teacher_acc,
                     teacher.model.checksum(), teacher_loss=list(teacher.loss_history))
    models = {"teacher": teacher.model}
    try:
        ranking, used_tau = selection.rank_from_training(
            teacher.model, train_ds, cfg.tau, cfg.tau_floor)
    except NoConfidentSamples as exc:
        rec.status = "failed"
        rec.diagnostic = str(exc)
        log.warning("subject %d: %s", split.subject, exc)
        return (rec, models) if keep_models else rec
    rec.n_voters = ranking.n_voters
    rec.tau_used = used_tau
    rec.ranking = [int(i) for i in ranking.order]
    rec.channel_totals = [float(v) for v in ranking.scores]
    for n in n_values:
        chosen = select_top_n(ranking, n)
        sub_train = restrict_channels(train_ds, chosen)
        sub_test = restrict_channels(test_ds, chosen)
        student = train(build_student(spec, n), sub_train,
                        cfg.replace(seed=student_seed(cfg, split.subject, n)))
        acc = accuracy(student.model.predict(sub_test.X), sub_test.labels)
        log.info("subject %d: N=%d student acc %.4f", split.subject, n, acc)
        rec.students.append(StudentRecord(
            n, chosen, [dataset.channel_names[i] for i in chosen], acc,
            planted_recall(chosen, dataset.planted), student.model.checksum()))
        models[n] = student.model
    return (rec, models) if keep_models else rec


def _stats(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"count": 0, "mean": None, "std": None}
    return {"count": int(v.size), "mean": float(v.mean()), "std": float(v.std())}


def _run_folds(dataset, cfg, n_values, jobs):
    splits = loso_splits(dataset)
    if jobs and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = [ex.submit(run_ics_fold, dataset, s, cfg, n_values) for s in splits]
            return [f.result() for f in futs]
    return [run_ics_fold(dataset, s, cfg, n_values) for s in splits]


def _version_stamp():
    return {"eegics": __version__, "numpy": np.__version__,
            "kernel_backend": _kernels.BACKEND}


def _dataset_info(dataset):
    return {"n_samples": len(dataset), "n_channels": dataset.n_channels,
            "n_timepoints": dataset.n_timepoints,
            "subjects": [int(s) for s in dataset.subject_ids()],
            "planted": list(dataset.planted)}


@dataclass
class IcsReport:
    kind: str
    config: dict
    dataset: dict
    folds: list
    summary: dict
    versions: dict = field(default_factory=_version_stamp)

    def to_dict(self):
        return {"kind": self.kind, "versions": self.versions, "config": self.config,
                "dataset": self.dataset, "summary": self.summary, "folds": self.folds}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())


def _fold_entry(rec, n=None):
    d = {"subject": rec.subject, "status": rec.status, "diagnostic": rec.diagnostic,
         "n_train": rec.n_train, "n_test": rec.n_test,
         "teacher_accuracy": rec.teacher_accuracy, "n_voters": rec.n_voters,
         "tau_used": rec.tau_used, "ranking": rec.ranking,
         "channel_totals": rec.channel_totals, "teacher_checksum": rec.teacher_checksum,
         "teacher_loss": rec.teacher_loss}
    if n is not None:
        s = rec.student(n)
        d.update({"student_accuracy": s.accuracy if s else None,
                  "selected_channels": s.selected if s else None,
                  "selected_names": s.selected_names if s else None,
                  "planted_recall": s.planted_recall if s else None,
                  "student_checksum": s.checksum if s else None})
    else:
        d["students"] = {str(s.n): asdict(s) for s in rec.students}
    return d


def loso_report(dataset, cfg, records, n=None):
    """LOSO report for student size ``n`` (default ``cfg.n_channels``)."""
    n = cfg.n_channels if n is None else n
    ok = [r for r in records if r.status == "ok"]
    if not ok:
        raise PipelineError("all folds failed: " + "; ".join(
            f"subject {r.subject}: {r.diagnostic}" for r in records))
    recalls = [r.student(n).planted_recall for r in ok if r.student(n).planted_recall is not None]
    summary = {
        "n_folds": len(records), "n_succeeded": len(ok),
        "teacher": _stats([r.teacher_accuracy for r in records]),
        "teacher_succeeded": _stats([r.teacher_accuracy for r in ok]),
        "student": _stats([r.student(n).accuracy for r in ok]),
        "planted_recall": _stats(recalls),
    }
    return IcsReport("loso", cfg.replace(n_channels=n).to_dict(), _dataset_info(dataset),
                     [_fold_entry(r, n) for r in records], summary)


def run_loso(dataset, cfg, jobs=None):
    """One fold per subject; aggregate teacher and student accuracies.

    Returns ``(report, fold_records)``.
    """
    records = _run_folds(dataset, cfg, [cfg.n_channels], jobs)
    return loso_report(dataset, cfg, records), records


def run_n_sweep(dataset, cfg, n_values=DEFAULT_SWEEP, jobs=None):
    """Mean student accuracy per N; one teacher and one vote per fold."""
    n_values = sorted(set(int(n) for n in n_values))
    if not n_values:
        raise ValueError("empty N list")
    for n in n_values:
        if not 1 <= n <= dataset.n_channels:
            raise ValueError(f"N={n} outside [1, {dataset.n_channels}]")
    records = _run_folds(dataset, cfg, n_values, jobs)
    ok = [r for r in records if r.status == "ok"]
    if not ok:
        raise PipelineError("all folds failed: " + "; ".join(
            f"subject {r.subject}: {r.diagnostic}" for r in records))
    table = []
    for n in n_values:
        row = {"n": n, **_stats([r.student(n).accuracy for r in ok])}
        rec = [r.student(n).planted_recall for r in ok]
        row["planted_recall"] = (float(np.mean(rec)) if rec and rec[0] is not None else None)
        table.append(row)
    summary = {"n_folds": len(records), "n_succeeded": len(ok), "n_values": n_values,
               "teacher": _stats([r.teacher_accuracy for r in records]),
               "teacher_succeeded": _stats([r.teacher_accuracy for r in ok]),
               "table": table}
    return IcsReport("sweep", cfg.to_dict(), _dataset_info(dataset),
                     [_fold_entry(r) for r in records], summary), records
