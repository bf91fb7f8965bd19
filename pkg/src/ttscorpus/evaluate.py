"""Reference-based synthesis metrics: WER and SpeechBERTScore.

WER comes from a minimal-cost word-level alignment of the ASR transcript
of generated audio against the input text. SpeechBERTScore embeds
reference and generated audio as frame sequences and scores them by
dense max-cosine alignment: precision over generated frames, recall over
reference frames, F1 as the headline number.

Embedding providers are interchangeable callables; the built-in log-mel
provider keeps the whole metric stack runnable without any model, while
the inference sidecar supplies SSL embeddings for faithful scores.
Scores from different model_tags are never comparable.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from .audio import AudioBuffer, AudioDecodeError, decode_audio, resample
from .sampler import TestsetSpec
from .services import ServiceConfig, ServiceError, transcribe
from .textnorm import (
    collapse_whitespace,
    remove_digits,
    remove_punctuation,
    strip_diacritics,
    unify_alef,
)


@dataclass(frozen=True)
class NormalizationPolicy:
    strip_diacritics: bool = True
    unify_alef_forms: bool = False
    remove_punctuation: bool = True
    collapse_whitespace: bool = True
    digits_rule: str = "keep"  # keep | drop

    def __post_init__(self) -> None:
        if not self.collapse_whitespace:
            raise ValueError("collapse_whitespace is always on")
        if self.digits_rule not in ("keep", "drop"):
            raise ValueError(f"digits_rule must be keep or drop, got {self.digits_rule!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "strip_diacritics": self.strip_diacritics,
            "unify_alef_forms": self.unify_alef_forms,
            "remove_punctuation": self.remove_punctuation,
            "collapse_whitespace": self.collapse_whitespace,
            "digits_rule": self.digits_rule,
        }


def normalize_text(text: str, policy: NormalizationPolicy | None = None) -> str:
    """Normalize per policy; idempotent by construction."""
    policy = policy or NormalizationPolicy()
    if policy.strip_diacritics:
        text = strip_diacritics(text)
    if policy.unify_alef_forms:
        text = unify_alef(text)
    if policy.remove_punctuation:
        text = remove_punctuation(text)
    if policy.digits_rule == "drop":
        text = remove_digits(text)
    return collapse_whitespace(text)


@dataclass(frozen=True)
class WerCounts:
    rate: float
    substitutions: int
    deletions: int
    insertions: int
    ref_word_count: int


def wer(reference: str, hypothesis: str, policy: NormalizationPolicy | None = None) -> WerCounts:
    """Word error rate with unit-cost Levenshtein alignment.

    rate = (S + D + I) / N over normalized word sequences; alignment ties
    prefer substitutions over insert+delete pairs.
    """
    ref_words = normalize_text(reference, policy).split()
    hyp_words = normalize_text(hypothesis, policy).split()
    if not ref_words:
        raise ValueError("reference is empty after normalization")

    n, m = len(ref_words), len(hyp_words)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    dist[0] = list(range(m + 1))
    for i in range(1, n + 1):
        ref_word = ref_words[i - 1]
        row, prev = dist[i], dist[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ref_word == hyp_words[j - 1] else 1
            row[j] = min(prev[j - 1] + cost, prev[j] + 1, row[j - 1] + 1)

    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if ref_words[i - 1] == hyp_words[j - 1] else 1
            if dist[i][j] == dist[i - 1][j - 1] + cost:
                subs += cost
                i, j = i - 1, j - 1
                continue
        if i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1

    return WerCounts(
        rate=(subs + dels + ins) / n,
        substitutions=subs,
        deletions=dels,
        insertions=ins,
        ref_word_count=n,
    )


@dataclass(frozen=True)
class EmbeddingSequence:
    """T x D frame embeddings plus the provenance needed to compare them."""

    frames: np.ndarray
    frame_rate_hz: float
    model_tag: str

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValueError(f"frames must be a non-empty T x D matrix, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("embedding frames contain non-finite values")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)


@dataclass(frozen=True)
class SpeechBertScore:
    precision: float
    recall: float
    f1: float


def speech_bert_score(reference: EmbeddingSequence, generated: EmbeddingSequence) -> SpeechBertScore:
    """Dense max-cosine alignment between two embedding sequences.

    Zero-norm frames count as similarity 0 against everything. Exact
    O(T_ref * T_gen) pooling; fine at utterance scale.
    """
    if reference.model_tag != generated.model_tag:
        raise ValueError(
            f"embeddings from different models are not comparable: "
            f"{reference.model_tag!r} vs {generated.model_tag!r}"
        )
    if reference.frames.shape[1] != generated.frames.shape[1]:
        raise ValueError(
            f"embedding dimensions differ: {reference.frames.shape[1]} vs {generated.frames.shape[1]}"
        )
    ref = _normalize_rows(reference.frames)
    gen = _normalize_rows(generated.frames)
    sims = ref @ gen.T  # T_ref x T_gen
    precision = float(sims.max(axis=0).mean())
    recall = float(sims.max(axis=1).mean())
    denom = precision + recall
    f1 = 2.0 * precision * recall / denom if denom != 0 else 0.0
    return SpeechBertScore(precision=precision, recall=recall, f1=f1)


def _normalize_rows(frames: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(frames, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return frames / safe


class LogMelEmbedder:
    """Built-in deterministic embedding provider: log-mel frames.

    25 ms windows, 10 ms hop, 80 mel bins by default; enough structure
    for alignment-based scoring and fully reproducible with no model.
    """

    def __init__(
        self,
        sample_rate: int = 16000,
        n_mels: int = 80,
        window_s: float = 0.025,
        hop_s: float = 0.010,
    ):
        self.sample_rate = sample_rate
        self.n_mels = n_mels
        self.window_len = int(round(window_s * sample_rate))
        self.hop_len = int(round(hop_s * sample_rate))
        self.frame_rate_hz = sample_rate / self.hop_len
        self.model_tag = f"logmel/{n_mels}mel-{int(window_s * 1000)}ms/0"
        self._window = np.hanning(self.window_len)
        self._filterbank = _mel_filterbank(n_mels, self.window_len, sample_rate)

    def __call__(self, buffer: AudioBuffer) -> EmbeddingSequence:
        buffer = resample(buffer, self.sample_rate)
        samples = buffer.samples.astype(np.float64)
        if len(samples) < self.window_len:
            samples = np.pad(samples, (0, self.window_len - len(samples)))
        n_frames = 1 + (len(samples) - self.window_len) // self.hop_len
        idx = np.arange(self.window_len)[None, :] + self.hop_len * np.arange(n_frames)[:, None]
        frames = samples[idx] * self._window
        power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
        mel = power @ self._filterbank.T
        logmel = np.log(mel + 1e-10)
        return EmbeddingSequence(
            frames=logmel, frame_rate_hz=self.frame_rate_hz, model_tag=self.model_tag
        )


def _mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters over the rfft bins (HTK mel scale)."""

    def hz_to_mel(hz):
        return 2595.0 * np.log10(1.0 + hz / 700.0)

    def mel_to_hz(mel):
        return 700.0 * (10.0 ** (mel / 2595.0) - 1.0)

    n_bins = n_fft // 2 + 1
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_bins) * sample_rate / n_fft
    bank = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lower, center, upper = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - lower) / max(center - lower, 1e-12)
        falling = (upper - bin_freqs) / max(upper - center, 1e-12)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


Embedder = Callable[[AudioBuffer], EmbeddingSequence]


@dataclass
class UtteranceRow:
    utterance_id: str
    speaker_id: str | None
    status: str  # ok | missing | failed
    wer: float | None = None
    substitutions: int | None = None
    deletions: int | None = None
    insertions: int | None = None
    ref_word_count: int | None = None
    speech_bert_precision: float | None = None
    speech_bert_recall: float | None = None
    speech_bert_f1: float | None = None
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class EvalReport:
    rows: list[UtteranceRow]
    corpus_wer: float | None
    mean_speech_bert_f1: float | None
    evaluated_count: int
    missing_count: int
    failed_count: int
    policy: dict[str, Any]
    model_tag: str
    provenance: dict[str, Any] = field(default_factory=dict)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "rows": [row.to_dict() for row in self.rows],
            "aggregates": {
                "corpus_wer": self.corpus_wer,
                "mean_speech_bert_f1": self.mean_speech_bert_f1,
                "evaluated_count": self.evaluated_count,
                "missing_count": self.missing_count,
                "failed_count": self.failed_count,
            },
            "policy": self.policy,
            "model_tag": self.model_tag,
            "provenance": self.provenance,
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, ensure_ascii=False, sort_keys=True, indent=2)
            fh.write("\n")

    def render_table(self) -> str:
        """Aligned plain-text table, rows sorted ascending by WER."""
        header = f"{'utterance':<20} {'speaker':<12} {'WER':>8} {'SpeechBERT':>11}"
        lines = [header, "-" * len(header)]
        ok_rows = [r for r in self.rows if r.status == "ok"]
        for row in sorted(ok_rows, key=lambda r: (r.wer, r.utterance_id)):
            lines.append(
                f"{row.utterance_id:<20} {row.speaker_id or '-':<12} "
                f"{row.wer:>8.4f} {row.speech_bert_f1:>11.4f}"
            )
        for row in self.rows:
            if row.status != "ok":
                lines.append(f"{row.utterance_id:<20} {row.speaker_id or '-':<12} [{row.status}] {row.error or ''}")
        wer_s = f"{self.corpus_wer:.4f}" if self.corpus_wer is not None else "n/a"
        sbs_s = f"{self.mean_speech_bert_f1:.4f}" if self.mean_speech_bert_f1 is not None else "n/a"
        lines.append("-" * len(header))
        lines.append(f"{'corpus':<20} {'':<12} {wer_s:>8} {sbs_s:>11}")
        return "\n".join(lines)


def make_report(
    rows: list[UtteranceRow],
    policy: NormalizationPolicy,
    model_tag: str,
    provenance: dict[str, Any] | None = None,
) -> EvalReport:
    """Assemble a report; aggregates derive exactly from the row counts."""
    rows = sorted(rows, key=lambda r: r.utterance_id)
    ok_rows = [r for r in rows if r.status == "ok"]
    total_errors = sum(r.substitutions + r.deletions + r.insertions for r in ok_rows)
    total_ref_words = sum(r.ref_word_count for r in ok_rows)
    return EvalReport(
        rows=rows,
        corpus_wer=(total_errors / total_ref_words) if total_ref_words else None,
        mean_speech_bert_f1=(
            sum(r.speech_bert_f1 for r in ok_rows) / len(ok_rows) if ok_rows else None
        ),
        evaluated_count=len(ok_rows),
        missing_count=sum(1 for r in rows if r.status == "missing"),
        failed_count=sum(1 for r in rows if r.status == "failed"),
        policy=policy.to_dict(),
        model_tag=model_tag,
        provenance=provenance or {},
    )


def evaluate_testset(
    testset: TestsetSpec,
    generated_audio: Mapping[str, str | Path],
    asr: ServiceConfig,
    embedder: Embedder,
    policy: NormalizationPolicy | None = None,
    clip_root: str | Path | None = None,
) -> EvalReport:
    """Score every eval utterance of a test set against its generation.

    Per-utterance WER uses the ASR transcript of the generated audio
    against the record's input text; SpeechBERTScore compares the
    reference segment audio with the generated audio under the given
    embedder. Missing generated files and per-utterance failures become
    rows of their own and never abort the run.
    """
    policy = policy or NormalizationPolicy()
    pairs = [(entry, record) for entry in testset.speakers for record in entry.eval_segments]

    def resolve_reference(path: str) -> Path:
        # manifest audio paths are workspace-relative; generated paths are
        # caller-supplied and used as given
        resolved = Path(path)
        if clip_root is not None and not resolved.is_absolute():
            resolved = Path(clip_root) / resolved
        return resolved

    def score_one(entry, record) -> UtteranceRow:
        gen_path = generated_audio.get(record.id)
        if gen_path is None:
            return UtteranceRow(
                utterance_id=record.id,
                speaker_id=entry.speaker_id,
                status="missing",
                error="no generated audio supplied",
            )
        try:
            if record.text is None:
                raise ValueError("record has no transcript")
            if record.audio_path is None:
                raise ValueError("record has no reference audio")
            gen_buf = decode_audio(Path(gen_path))
            hyp = transcribe(gen_buf, asr)
            counts = wer(record.text, hyp, policy)
            ref_buf = decode_audio(resolve_reference(record.audio_path))
            score = speech_bert_score(embedder(ref_buf), embedder(gen_buf))
        except (ServiceError, AudioDecodeError, ValueError, OSError) as exc:
            return UtteranceRow(
                utterance_id=record.id,
                speaker_id=entry.speaker_id,
                status="failed",
                error=f"{type(exc).__name__}: {exc}",
            )
        return UtteranceRow(
            utterance_id=record.id,
            speaker_id=entry.speaker_id,
            status="ok",
            wer=counts.rate,
            substitutions=counts.substitutions,
            deletions=counts.deletions,
            insertions=counts.insertions,
            ref_word_count=counts.ref_word_count,
            speech_bert_precision=score.precision,
            speech_bert_recall=score.recall,
            speech_bert_f1=score.f1,
        )

    rows: list[UtteranceRow] = []
    with ThreadPoolExecutor(max_workers=asr.max_concurrency) as pool:
        futures = [pool.submit(score_one, entry, record) for entry, record in pairs]
        for future in as_completed(futures):
            rows.append(future.result())

    return make_report(
        rows,
        policy,
        model_tag=getattr(embedder, "model_tag", "unknown"),
        provenance={"asr_endpoint": asr.endpoint_url, "n_speakers": len(testset.speakers)},
    )
