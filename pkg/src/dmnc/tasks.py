"""Task data: generators, file formats, and evaluation metrics.

Two settings are covered. The sum task pairs two equal-length random number
sequences whose outputs are element sums with one view reversed, so a model
must align positions across views. The synthetic medical-record task plants
two kinds of rules: cross-view rules mapping a (diagnosis, procedure) pair in
the current admission to a drug label, and history rules mapping a diagnosis
in the previous admission to a drug label in the current one. History labels
are only predictable by carrying information across admissions because the
diagnoses of different admissions are drawn independently.

Events are stored everywhere as vocabulary indices. For the sum task the
mapping is value v -> index v-1 on the input side (values 1..value_max) and
sum y -> index y-2 on the output side (sums 2..2*value_max).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParseError

PRECISION_KS = (1, 2, 3, 5)


@dataclass
class TwoViewSample:
    """One two-view item: index sequences per view plus the target.

    ``output`` is an ordered index list for sequence tasks and a frozenset of
    label indices for set tasks.
    """

    view1: list[int]
    view2: list[int]
    output: list[int] | frozenset[int]


@dataclass
class PatientRecord:
    """Ordered admissions of one patient; order carries the history signal."""

    patient: str
    admissions: list[TwoViewSample]


# ---------------------------------------------------------------------------
# Sum of two sequences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SumTaskConfig:
    """Random two-sequence sums: lengths uniform in [1, lmax], values in
    [1, value_max], outputs y_i = x1_i + x2_{L+1-i} in [2, 2*value_max]."""

    lmax: int = 10
    value_max: int = 50

    def __post_init__(self) -> None:
        if self.lmax < 1 or self.value_max < 1:
            raise DataError(f"sum task needs lmax >= 1 and value_max >= 1, "
                            f"got lmax={self.lmax} value_max={self.value_max}")

    @property
    def input_vocab(self) -> int:
        return self.value_max

    @property
    def output_vocab(self) -> int:
        return 2 * self.value_max - 1


def gen_sum_sample(cfg: SumTaskConfig, rng: np.random.Generator) -> TwoViewSample:
    length = int(rng.integers(1, cfg.lmax + 1))
    x1 = rng.integers(1, cfg.value_max + 1, size=length)
    x2 = rng.integers(1, cfg.value_max + 1, size=length)
    y = x1 + x2[::-1]
    return TwoViewSample(view1=(x1 - 1).tolist(), view2=(x2 - 1).tolist(),
                         output=(y - 2).tolist())


def gen_sum_dataset(cfg: SumTaskConfig, count: int,
                    rng: np.random.Generator) -> list[TwoViewSample]:
    return [gen_sum_sample(cfg, rng) for _ in range(count)]


def save_sum_samples(path, cfg: SumTaskConfig, samples: list[TwoViewSample]) -> None:
    """One JSON object per line, values stored in human units (1..value_max)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": {"task": "sum", "lmax": cfg.lmax,
                                        "value_max": cfg.value_max}}) + "\n")
        for s in samples:
            fh.write(json.dumps({
                "view1": [v + 1 for v in s.view1],
                "view2": [v + 1 for v in s.view2],
                "y": [v + 2 for v in s.output],
            }) + "\n")


def load_sum_samples(path) -> tuple[SumTaskConfig, list[TwoViewSample]]:
    samples: list[TwoViewSample] = []
    cfg = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", line=lineno) from e
            if "header" in obj:
                head = obj["header"]
                if head.get("task") != "sum":
                    raise ParseError(f"expected a sum-task header, got {head!r}",
                                     line=lineno)
                cfg = SumTaskConfig(lmax=int(head["lmax"]),
                                    value_max=int(head["value_max"]))
                continue
            if cfg is None:
                raise ParseError("sample line before the header", line=lineno)
            try:
                v1, v2, y = obj["view1"], obj["view2"], obj["y"]
            except KeyError as e:
                raise ParseError(f"missing field {e.args[0]}", line=lineno) from e
            if not (len(v1) == len(v2) == len(y)) or len(v1) < 1:
                raise ParseError("views and output must share a length >= 1",
                                 line=lineno)
            for v in list(v1) + list(v2):
                if not 1 <= v <= cfg.value_max:
                    raise DataError(f"input value {v} outside [1, {cfg.value_max}] "
                                    f"on line {lineno}")
            for v in y:
                if not 2 <= v <= 2 * cfg.value_max:
                    raise DataError(f"output value {v} outside "
                                    f"[2, {2 * cfg.value_max}] on line {lineno}")
            samples.append(TwoViewSample(view1=[v - 1 for v in v1],
                                         view2=[v - 1 for v in v2],
                                         output=[v - 2 for v in y]))
    if cfg is None and samples:
        raise ParseError("no header line found", line=1)
    return cfg if cfg is not None else SumTaskConfig(), samples


# ---------------------------------------------------------------------------
# Synthetic medical records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticEmrConfig:
    """Vocabulary sizes and planted rule tables.

    ``pair_rules`` maps every (diagnosis, procedure) pair to a drug label in
    [0, cross_labels); ``history_rules`` maps every diagnosis to a drug label
    in [cross_labels, cross_labels + history_labels). The two label ranges
    are disjoint so history performance is measurable in isolation.
    """

    n_diag: int
    n_proc: int
    cross_labels: int
    history_labels: int
    pair_rules: dict[tuple[int, int], int] = field(hash=False)
    history_rules: dict[int, int] = field(hash=False)
    diag_per_admission: tuple[int, int] = (2, 4)
    proc_per_admission: tuple[int, int] = (1, 3)
    admissions_per_patient: tuple[int, int] = (2, 4)

    @property
    def n_label(self) -> int:
        return self.cross_labels + self.history_labels

    @property
    def history_range(self) -> tuple[int, int]:
        return (self.cross_labels, self.n_label)


def make_emr_config(rng: np.random.Generator, n_diag: int = 20, n_proc: int = 12,
                    cross_labels: int = 24, history_labels: int = 8,
                    **kwargs) -> SyntheticEmrConfig:
    """Draw total rule tables over the whole vocabulary."""
    pair_rules = {}
    for d in range(n_diag):
        for p in range(n_proc):
            pair_rules[(d, p)] = int(rng.integers(0, cross_labels))
    history_rules = {d: cross_labels + int(rng.integers(0, history_labels))
                     for d in range(n_diag)}
    return SyntheticEmrConfig(n_diag=n_diag, n_proc=n_proc,
                              cross_labels=cross_labels,
                              history_labels=history_labels,
                              pair_rules=pair_rules,
                              history_rules=history_rules, **kwargs)


def emr_labels(cfg: SyntheticEmrConfig, diags: list[int], procs: list[int],
               prev_diags: list[int] | None) -> frozenset[int]:
    """Drug set implied by the planted rules for one admission."""
    labels = {cfg.pair_rules[(d, p)] for d in diags for p in procs}
    if prev_diags:
        labels |= {cfg.history_rules[d] for d in prev_diags}
    return frozenset(labels)


def gen_emr_patients(cfg: SyntheticEmrConfig, count: int,
                     rng: np.random.Generator) -> list[PatientRecord]:
    patients = []
    for pid in range(count):
        n_adm = int(rng.integers(cfg.admissions_per_patient[0],
                                 cfg.admissions_per_patient[1] + 1))
        admissions = []
        prev_diags: list[int] | None = None
        for _ in range(n_adm):
            k_d = int(rng.integers(cfg.diag_per_admission[0],
                                   cfg.diag_per_admission[1] + 1))
            k_p = int(rng.integers(cfg.proc_per_admission[0],
                                   cfg.proc_per_admission[1] + 1))
            diags = rng.choice(cfg.n_diag, size=k_d, replace=False).tolist()
            procs = rng.choice(cfg.n_proc, size=k_p, replace=False).tolist()
            admissions.append(TwoViewSample(
                view1=[int(d) for d in diags],
                view2=[int(p) for p in procs],
                output=emr_labels(cfg, diags, procs, prev_diags)))
            prev_diags = diags
        patients.append(PatientRecord(patient=f"p{pid:05d}", admissions=admissions))
    return patients


def split_records(items: list, train: float = 2 / 3,
                  valid: float = 1 / 6) -> tuple[list, list, list]:
    """Deterministic split in list order (generation order is already random)."""
    n = len(items)
    n_train = int(n * train)
    n_valid = int(n * valid)
    return (items[:n_train], items[n_train:n_train + n_valid],
            items[n_train + n_valid:])


# ---------------------------------------------------------------------------
# Admission file format
# ---------------------------------------------------------------------------


@dataclass
class EmrDataset:
    n_diag: int
    n_proc: int
    n_label: int
    patients: list[PatientRecord]
    # Boundary between cross-view labels [0, cross_labels) and history labels
    # [cross_labels, n_label); optional because ingested real data has no
    # planted rule structure.
    cross_labels: int | None = None


def save_admissions(path, dataset: EmrDataset) -> None:
    """Line-delimited JSON: a header then one admission per line, patients
    contiguous with 1-based ascending admission numbers."""
    head = {"n_diag": dataset.n_diag, "n_proc": dataset.n_proc,
            "n_label": dataset.n_label}
    if dataset.cross_labels is not None:
        head["cross_labels"] = dataset.cross_labels
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": head}) + "\n")
        for record in dataset.patients:
            for i, adm in enumerate(record.admissions, start=1):
                fh.write(json.dumps({
                    "patient": record.patient, "admission": i,
                    "diag": list(adm.view1), "proc": list(adm.view2),
                    "labels": sorted(adm.output),
                }) + "\n")


def load_admissions(path) -> EmrDataset:
    header = None
    cross_labels = None
    patients: list[PatientRecord] = []
    seen: set[str] = set()
    current: str | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", line=lineno) from e
            if "header" in obj:
                if header is not None:
                    raise ParseError("duplicate header", line=lineno)
                head = obj["header"]
                try:
                    header = (int(head["n_diag"]), int(head["n_proc"]),
                              int(head["n_label"]))
                except KeyError as e:
                    raise ParseError(f"header missing {e.args[0]}", line=lineno) from e
                if "cross_labels" in head:
                    cross_labels = int(head["cross_labels"])
                continue
            if header is None:
                raise ParseError("admission line before the header", line=lineno)
            try:
                pid = obj["patient"]
                number = int(obj["admission"])
                diag, proc, labels = obj["diag"], obj["proc"], obj["labels"]
            except KeyError as e:
                raise ParseError(f"missing field {e.args[0]}", line=lineno) from e
            if not diag or not proc:
                raise ParseError("diag and proc must be non-empty", line=lineno)
            n_diag, n_proc, n_label = header
            for code in diag:
                if not 0 <= code < n_diag:
                    raise DataError(f"diagnosis code {code} outside vocabulary "
                                    f"of size {n_diag} on line {lineno}")
            for code in proc:
                if not 0 <= code < n_proc:
                    raise DataError(f"procedure code {code} outside vocabulary "
                                    f"of size {n_proc} on line {lineno}")
            for code in labels:
                if not 0 <= code < n_label:
                    raise DataError(f"drug label {code} outside vocabulary "
                                    f"of size {n_label} on line {lineno}")
            sample = TwoViewSample(view1=list(diag), view2=list(proc),
                                   output=frozenset(labels))
            if pid == current:
                if number != len(patients[-1].admissions) + 1:
                    raise ParseError(f"admission {number} of patient {pid} out "
                                     f"of order", line=lineno)
                patients[-1].admissions.append(sample)
            else:
                if pid in seen:
                    raise ParseError(f"patient {pid} appears in two separate "
                                     f"blocks", line=lineno)
                if number != 1:
                    raise ParseError(f"patient {pid} starts at admission "
                                     f"{number}, expected 1", line=lineno)
                seen.add(pid)
                current = pid
                patients.append(PatientRecord(patient=pid, admissions=[sample]))
    if header is None:
        return EmrDataset(0, 0, 0, [])
    return EmrDataset(header[0], header[1], header[2], patients, cross_labels)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def metric_seq_accuracy(preds: list[list[int]], targets: list[list[int]]) -> float:
    """Mean per-position exact match pooled over every position of every sample."""
    if len(preds) != len(targets):
        raise DataError(f"{len(preds)} predictions vs {len(targets)} targets")
    hits = 0
    total = 0
    for p, t in zip(preds, targets):
        if len(p) != len(t):
            raise DataError(f"prediction length {len(p)} vs target length {len(t)}")
        hits += sum(1 for a, b in zip(p, t) if a == b)
        total += len(t)
    return hits / total if total else 0.0


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing the mean of their rank span."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _auc_from_ranks(scores: np.ndarray, positives: np.ndarray) -> float:
    """Rank-based ROC AUC (probability a positive outranks a negative)."""
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    ranks = _average_ranks(scores)
    pos_rank_sum = ranks[positives].sum()
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties broken by lowest index."""
    return np.argsort(-scores, kind="stable")[:k]


def metric_multilabel(scores: list[np.ndarray], truths: list[frozenset[int]],
                      ks: tuple[int, ...] = PRECISION_KS) -> dict[str, float]:
    """Macro AUC and F1 plus precision at k.

    Labels with no positive or no negative sample are skipped from the AUC
    macro average. F1 thresholds at 0.5 and scores 0 when a label has no
    positive truth and no positive prediction.
    """
    if len(scores) != len(truths):
        raise DataError(f"{len(scores)} score rows vs {len(truths)} truth sets")
    mat = np.asarray(scores)
    n_samples, n_labels = mat.shape
    truth = np.zeros((n_samples, n_labels), dtype=bool)
    for i, labels in enumerate(truths):
        for l in labels:
            truth[i, l] = True

    aucs = []
    f1s = []
    for l in range(n_labels):
        pos = truth[:, l]
        if 0 < pos.sum() < n_samples:
            aucs.append(_auc_from_ranks(mat[:, l], pos))
        pred = mat[:, l] >= 0.5
        tp = int((pred & pos).sum())
        fp = int((pred & ~pos).sum())
        fn = int((~pred & pos).sum())
        f1s.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)

    out = {
        "macro_auc": float(np.mean(aucs)) if aucs else 0.0,
        "macro_f1": float(np.mean(f1s)) if f1s else 0.0,
    }
    for k in ks:
        hits = [len(set(top_k(mat[i], k)) & truths[i]) / k
                for i in range(n_samples)]
        out[f"p_at_{k}"] = float(np.mean(hits)) if hits else 0.0
    return out


def history_p_at_1(scores: list[np.ndarray], truths: list[frozenset[int]],
                   label_range: tuple[int, int]) -> float:
    """P@1 measured inside the history-label slice alone.

    Over samples holding at least one truth label in the slice, score 1 when
    the top-scored label within the slice is a true one. Isolates how well
    carried-over admission context is used, independent of the cross-view
    labels that dominate the full ranking.
    """
    lo, hi = label_range
    hits = []
    for row, labels in zip(scores, truths):
        subset = {l for l in labels if lo <= l < hi}
        if not subset:
            continue
        best = lo + int(top_k(np.asarray(row[lo:hi]), 1)[0])
        hits.append(1.0 if best in subset else 0.0)
    return float(np.mean(hits)) if hits else 0.0
