"""Dataset derivation, splitting, synthesis, and JSONL ingestion.

An instance couples a tokenized source/target pair with span-level error
annotations. Sentence scores and word labels are always *derived* from
the annotations: the score sums severity weights (minor 1, major 5,
critical 10) and every token inside an annotated span is labeled BAD,
the rest OK. Stored derived fields in files are cross-checked, never
trusted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SEVERITY_WEIGHTS = {"minor": 1, "major": 5, "critical": 10}
SIDES = ("source", "target")
EMOTIONS = ("anger", "joy", "sadness", "surprise", "fear")
OK, BAD = "OK", "BAD"


class SchemaError(ValueError):
    """A dataset record violates the file schema."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class SpanOutOfBounds(SchemaError):
    """An error span exceeds the token sequence it annotates."""


class ScoreMismatch(SchemaError):
    """A stored sentence score disagrees with the derived score."""


class TooFewInstances(ValueError):
    """Not enough instances to produce a train/validation/test split."""


@dataclass(frozen=True)
class ErrorAnnotation:
    severity: str  # minor | major | critical
    side: str  # source | target
    start: int  # token index, inclusive
    end: int  # token index, exclusive

    def __post_init__(self):
        if self.severity not in SEVERITY_WEIGHTS:
            raise ValueError(f"unknown severity {self.severity!r}")
        if self.side not in SIDES:
            raise ValueError(f"unknown side {self.side!r}")
        if not (0 <= self.start < self.end):
            raise ValueError(f"bad span [{self.start}, {self.end})")

    @property
    def weight(self) -> int:
        return SEVERITY_WEIGHTS[self.severity]


@dataclass(frozen=True)
class QEInstance:
    src_tokens: tuple[str, ...]
    tgt_tokens: tuple[str, ...]
    errors: tuple[ErrorAnnotation, ...]
    emotion: str
    # always derived from the annotations; never accepted from callers
    qe_score: float = field(init=False)
    src_labels: tuple[str, ...] = field(init=False)
    tgt_labels: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        if self.emotion not in EMOTIONS:
            raise ValueError(f"emotion must be one of {EMOTIONS}, got {self.emotion!r}")
        for err in self.errors:
            n = len(self.src_tokens) if err.side == "source" else len(self.tgt_tokens)
            if err.end > n:
                raise SpanOutOfBounds(
                    f"span [{err.start}, {err.end}) exceeds {err.side} length {n}"
                )
        object.__setattr__(self, "qe_score", float(derive_sentence_score(self.errors)))
        object.__setattr__(
            self,
            "src_labels",
            tuple(derive_word_labels(len(self.src_tokens), _on_side(self.errors, "source"))),
        )
        object.__setattr__(
            self,
            "tgt_labels",
            tuple(derive_word_labels(len(self.tgt_tokens), _on_side(self.errors, "target"))),
        )


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[QEInstance, ...]
    validation: tuple[QEInstance, ...]
    test: tuple[QEInstance, ...]


# offset bands (in content-vocabulary index space) used by the
# mistranslation corruption style; disjoint so severity stays decodable
SEVERITY_OFFSET_BANDS = {"minor": (1, 2, 3), "major": (4, 5, 6), "critical": (7, 8, 9)}


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a learnable synthetic QE corpus.

    Target tokens are a deterministic word-for-word "translation" of the
    source, and one emotion-marker token pair determines the emotion
    label. Corrupted target positions are recorded as error annotations,
    so derived scores and labels are consistent by construction. Two
    corruption styles:

    - "lexical" (default): the target is a deterministic word-for-word
      relabeling of the source and a corrupted position holds a
      severity-tagged substitute token; detection means memorizing the
      substitute pool, so the pool size paces learning.
    - "mistranslation": source and target share one vocabulary and the
      clean target is a copy of the source; a corrupted position holds a
      content token whose index offset from the aligned source token
      falls in a severity-specific band, so badness and severity are
      relational (src/tgt correspondence), not lexical. Much harder;
      desk-scale encoders learn it slowly.

    The defaults are calibrated so that a compact model neither
    saturates within a few epochs nor stalls: moderate per-token rates,
    a 40-token substitute pool per severity, and a quarter of
    corruptions invisible (ordinary-looking tokens still labeled BAD),
    which keeps word-task gradients informative throughout training.
    """

    n_instances: int
    seed: int
    vocab_size: int = 30
    bad_token_rates: dict = field(
        default_factory=lambda: {"minor": 0.07, "major": 0.035, "critical": 0.0175}
    )
    markers_per_class: int = 2
    src_len_range: tuple[int, int] = (8, 12)
    emotion_probs: tuple[float, ...] | None = None  # uniform when None
    corruption_style: str = "lexical"
    # fraction of corruptions that keep an ordinary-looking content token:
    # still annotated (BAD label, scored), but not detectable from the
    # surface form, leaving irreducible word-task uncertainty
    invisible_bad_fraction: float = 0.25
    # lexical style: distinct substitute tokens per severity; occurrences
    # per token set the memorization pace, so this is the difficulty knob
    substitutes_per_severity: int = 40
    # when set, each instance gets a corruption count drawn uniformly
    # from this range (positions without replacement) and the rates act
    # as severity mix weights; kills the count-only shortcut for the
    # sentence score, whose variance then comes from the severity mix
    bad_count_range: tuple[int, int] | None = None

    def __post_init__(self):
        if self.n_instances < 1:
            raise ValueError("n_instances must be positive")
        if self.corruption_style not in ("mistranslation", "lexical"):
            raise ValueError(f"unknown corruption_style {self.corruption_style!r}")
        if not 0.0 <= self.invisible_bad_fraction <= 1.0:
            raise ValueError("invisible_bad_fraction must lie in [0, 1]")
        if self.substitutes_per_severity < 1:
            raise ValueError("substitutes_per_severity must be positive")
        min_vocab = 20 if self.corruption_style == "mistranslation" else 1
        if self.vocab_size < min_vocab:
            raise ValueError(f"vocab_size must be at least {min_vocab} for this style")
        if self.markers_per_class < 1:
            raise ValueError("markers_per_class must be positive")
        rates = dict(self.bad_token_rates)
        if set(rates) - set(SEVERITY_WEIGHTS):
            raise ValueError(f"unknown severities in rates: {set(rates) - set(SEVERITY_WEIGHTS)}")
        if any(r < 0 for r in rates.values()):
            raise ValueError("bad-token rates must be nonnegative")
        if self.bad_count_range is None:
            # per-token mode: rates are probabilities; count mode treats
            # them as severity mix weights with no sum constraint
            if any(r > 1.0 for r in rates.values()) or sum(rates.values()) > 1.0:
                raise ValueError("bad-token rates must lie in [0, 1] and sum to at most 1")
        else:
            lo, hi = self.bad_count_range
            if not (0 <= lo <= hi):
                raise ValueError("bad_count_range must satisfy 0 <= lo <= hi")
            if sum(rates.values()) <= 0:
                raise ValueError("bad_count_range needs positive severity mix weights")
        if self.emotion_probs is not None:
            p = np.asarray(self.emotion_probs, dtype=np.float64)
            if p.shape != (len(EMOTIONS),) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError("emotion_probs must be a length-5 distribution")


def _on_side(errors, side: str):
    return [e for e in errors if e.side == side]


def derive_sentence_score(errors) -> int:
    """Sum of severity weights over all annotations (higher = worse)."""
    return sum(e.weight for e in errors)


def derive_word_labels(n_tokens: int, errors) -> list[str]:
    """BAD for every token covered by at least one span, OK elsewhere."""
    labels = [OK] * n_tokens
    for e in errors:
        if e.end > n_tokens:
            raise SpanOutOfBounds(f"span [{e.start}, {e.end}) exceeds length {n_tokens}")
        for i in range(e.start, e.end):
            labels[i] = BAD
    return labels


def split_dataset(instances, seed: int) -> DatasetSplit:
    """Deterministic 80/10/10 split: floor(0.8n) / floor(0.1n) / rest."""
    instances = list(instances)
    n = len(instances)
    if n < 10:
        raise TooFewInstances(f"need at least 10 instances, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(0.8 * n)
    n_val = int(0.1 * n)
    shuffled = [instances[i] for i in order]
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        validation=tuple(shuffled[n_train : n_train + n_val]),
        test=tuple(shuffled[n_train + n_val :]),
    )


def generate_synthetic(spec: SyntheticSpec) -> list[QEInstance]:
    """Deterministic synthetic corpus per :class:`SyntheticSpec`."""
    rng = np.random.default_rng(spec.seed)
    relational = spec.corruption_style == "mistranslation"
    content = [f"w{i:03d}" for i in range(spec.vocab_size)]
    if relational:
        # shared vocabulary: the clean target copies the source
        translated = {tok: tok for tok in content}
    else:
        translated = {f"w{i:03d}": f"v{i:03d}" for i in range(spec.vocab_size)}
    markers = {
        emo: [f"em-{emo}-{j}" for j in range(spec.markers_per_class)] for emo in EMOTIONS
    }
    for emo in EMOTIONS:
        for j, tok in enumerate(markers[emo]):
            translated[tok] = tok if relational else f"fm-{emo}-{j}"
    corruption = {
        sev: [f"bad-{sev}-{k}" for k in range(spec.substitutes_per_severity)]
        for sev in SEVERITY_WEIGHTS
    }

    severities = list(SEVERITY_WEIGHTS)
    rates = np.array([spec.bad_token_rates.get(s, 0.0) for s in severities])
    cum = np.cumsum(rates)
    probs = (
        np.full(len(EMOTIONS), 1.0 / len(EMOTIONS))
        if spec.emotion_probs is None
        else np.asarray(spec.emotion_probs, dtype=np.float64)
    )

    lo, hi = spec.src_len_range
    instances = []
    for _ in range(spec.n_instances):
        emotion = EMOTIONS[rng.choice(len(EMOTIONS), p=probs)]
        n_src = int(rng.integers(lo, hi + 1))
        src_ids = rng.integers(0, spec.vocab_size, size=n_src)
        src = [content[i] for i in src_ids]
        marker = markers[emotion][int(rng.integers(0, spec.markers_per_class))]
        marker_pos = int(rng.integers(0, n_src + 1))
        src.insert(marker_pos, marker)
        tgt = [translated[tok] for tok in src]
        content_positions = [p for p in range(len(tgt)) if p != marker_pos]
        if spec.bad_count_range is not None:
            lo_c, hi_c = spec.bad_count_range
            count = min(int(rng.integers(lo_c, hi_c + 1)), len(content_positions))
            chosen = rng.choice(len(content_positions), size=count, replace=False)
            mix = rates / rates.sum()
            hits = sorted(
                (content_positions[int(c)], severities[int(rng.choice(len(severities), p=mix))])
                for c in chosen
            )
        else:
            hits = []
            u = rng.random(len(tgt))
            for pos in content_positions:
                hit = np.searchsorted(cum, u[pos], side="right")
                if hit < len(severities) and u[pos] < cum[-1]:
                    hits.append((pos, severities[hit]))
        errors = []
        for pos, sev in hits:
            if rng.random() < spec.invisible_bad_fraction:
                # an ordinary token from the target-side vocabulary
                tgt[pos] = translated[content[int(rng.integers(0, spec.vocab_size))]]
            elif relational:
                src_idx = src_ids[pos if pos < marker_pos else pos - 1]
                band = SEVERITY_OFFSET_BANDS[sev]
                offset = band[int(rng.integers(0, len(band)))]
                tgt[pos] = content[(int(src_idx) + offset) % spec.vocab_size]
            else:
                tgt[pos] = corruption[sev][int(rng.integers(0, spec.substitutes_per_severity))]
            errors.append(ErrorAnnotation(sev, "target", pos, pos + 1))
        instances.append(
            QEInstance(
                src_tokens=tuple(src),
                tgt_tokens=tuple(tgt),
                errors=tuple(errors),
                emotion=emotion,
            )
        )
    return instances


def _require(record: dict, key: str, line: int):
    if key not in record:
        raise SchemaError(f"missing field {key!r}", line)
    return record[key]


def _token_list(value, key: str, line: int) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(t, str) for t in value):
        raise SchemaError(f"field {key!r} must be a list of strings", line)
    return tuple(value)


def _parse_record(record: dict, line: int, derived_required: bool) -> QEInstance:
    src = _token_list(_require(record, "src_tokens", line), "src_tokens", line)
    tgt = _token_list(_require(record, "tgt_tokens", line), "tgt_tokens", line)
    raw_errors = _require(record, "errors", line)
    if not isinstance(raw_errors, list):
        raise SchemaError("field 'errors' must be a list", line)
    errors = []
    for e in raw_errors:
        if not isinstance(e, dict):
            raise SchemaError("each error must be an object", line)
        try:
            ann = ErrorAnnotation(
                severity=_require(e, "severity", line),
                side=_require(e, "side", line),
                start=int(_require(e, "start", line)),
                end=int(_require(e, "end", line)),
            )
        except SchemaError:
            raise
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"bad error annotation: {exc}", line) from exc
        n = len(src) if ann.side == "source" else len(tgt)
        if ann.end > n:
            raise SpanOutOfBounds(
                f"span [{ann.start}, {ann.end}) exceeds {ann.side} length {n}", line
            )
        errors.append(ann)
    emotion = _require(record, "emotion", line)
    if emotion not in EMOTIONS:
        raise SchemaError(
            f"field 'emotion' must be one of {list(EMOTIONS)}, got {emotion!r}", line
        )
    inst = QEInstance(
        src_tokens=src, tgt_tokens=tgt, errors=tuple(errors), emotion=emotion
    )
    if "qe_score" in record:
        stored = record["qe_score"]
        if not isinstance(stored, (int, float)):
            raise SchemaError("field 'qe_score' must be a number", line)
        if float(stored) != inst.qe_score:
            raise ScoreMismatch(
                f"stored qe_score {stored} != derived {inst.qe_score:g}", line
            )
    elif derived_required:
        raise SchemaError("missing field 'qe_score'", line)
    for key, derived in (("src_labels", inst.src_labels), ("tgt_labels", inst.tgt_labels)):
        if key in record:
            stored = record[key]
            if not isinstance(stored, list) or any(l not in (OK, BAD) for l in stored):
                raise SchemaError(f"field {key!r} must be a list of OK/BAD labels", line)
            if tuple(stored) != derived:
                raise SchemaError(f"stored {key} disagree with derived labels", line)
    return inst


def instance_to_record(inst: QEInstance) -> dict:
    return {
        "src_tokens": list(inst.src_tokens),
        "tgt_tokens": list(inst.tgt_tokens),
        "errors": [
            {"severity": e.severity, "side": e.side, "start": e.start, "end": e.end}
            for e in inst.errors
        ],
        "emotion": inst.emotion,
        "qe_score": inst.qe_score,
        "src_labels": list(inst.src_labels),
        "tgt_labels": list(inst.tgt_labels),
    }


def load_dataset(path) -> list[QEInstance]:
    """Parse a JSONL corpus, recomputing and cross-checking derived fields."""
    instances = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line_no) from exc
            if not isinstance(record, dict):
                raise SchemaError("each line must be a JSON object", line_no)
            instances.append(_parse_record(record, line_no, derived_required=False))
    return instances


def save_dataset(path, instances) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_record(inst), sort_keys=True) + "\n")
