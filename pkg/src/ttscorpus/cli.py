"""Operator CLI: every pipeline stage as one subcommand.

Exit codes: 0 success, 1 data errors occurred but the run completed,
2 configuration problem or abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .audio import AudioDecodeError, decode_audio, extract_span, resample, write_wav
from .config import (
    ConfigError,
    PipelineConfig,
    config_leaves,
    created_at,
    derive_seed,
    load_config,
    parse_override,
)
from .curation import (
    ManifestError,
    SegmentRecord,
    corpus_stats,
    filter_records,
    new_record,
    noise_gate,
    read_manifest,
    save_manifest,
    write_manifest,
)
from .evaluate import LogMelEmbedder, evaluate_testset
from .sampler import (
    SamplingError,
    SubsetSpec,
    assign_speakers,
    build_testset,
    exclude_sources,
    load_testset,
    read_diarization,
    sample_subset,
    save_testset,
)
from .services import (
    AuthenticationError,
    Checkpoint,
    JournalCorruptionError,
    ServiceError,
    run_annotation_batch,
)
from .sidecar_client import SidecarClient, SidecarEmbedder
from .vad import detect_speech, external_vad, frame_energies, merge_spans, split_long_spans

logger = logging.getLogger("ttscorpus")

EXIT_OK = 0
EXIT_DATA_ERRORS = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttscorpus",
        description="Curate a TTS training corpus from long-form audio and evaluate synthesis.",
        epilog=(
            "Any config field is overridable as --<section>.<field> VALUE, "
            "e.g. --noise_gate.threshold_dbfs -25 or --asr.endpoint_url URL."
        ),
    )
    parser.add_argument("--config", help="YAML pipeline config", default=None)
    override_group = parser.add_argument_group("config overrides")
    for dotted, typ in config_leaves():
        override_group.add_argument(
            f"--{dotted}",
            dest=f"cfg::{dotted}",
            type=lambda raw, t=typ: parse_override(raw, t),
            default=None,
            metavar=typ.__name__.upper(),
            help=argparse.SUPPRESS,
        )

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="detect, split and extract speech segments")
    p.add_argument("--input", required=True, help="directory of source audio files")
    p.add_argument("--out", required=True, help="output manifest path")
    p.set_defaults(handler=cmd_segment)

    p = sub.add_parser("annotate", help="run ASR + diacritization over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--journal", default=None, help="annotation journal (default: workspace)")
    p.add_argument("--resume", action="store_true", help="continue from an existing journal")
    p.add_argument(
        "--override-corrupt-journal",
        action="store_true",
        help="skip undecodable journal lines instead of refusing to resume",
    )
    p.set_defaults(handler=cmd_annotate)

    p = sub.add_parser("filter", help="apply the noise and duration gates")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_filter)

    p = sub.add_parser("sample", help="draw an hour-budget subset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target-hours", type=float, required=True)
    p.add_argument("--mode", choices=["random", "max-diversity", "min-diversity"], default="random")
    p.add_argument("--tolerance", type=float, default=0.02)
    p.set_defaults(handler=cmd_sample)

    p = sub.add_parser("testset", help="build the held-out speaker test set")
    p.add_argument("--manifest", required=True)
    p.add_argument("--diarization", required=True, help="diarization JSONL")
    p.add_argument("--n-speakers", type=int, required=True)
    p.add_argument("--out", required=True, help="testset JSON path")
    p.add_argument("--train-out", required=True, help="training manifest after exclusion")
    p.set_defaults(handler=cmd_testset)

    p = sub.add_parser("stats", help="corpus statistics for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None, help="also write stats JSON here")
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("eval", help="score generated audio against a test set")
    p.add_argument("--testset", required=True)
    p.add_argument("--generated-dir", required=True, help="directory of <utterance_id>.wav files")
    p.add_argument("--out", required=True, help="evaluation report JSON")
    p.add_argument("--embedder", choices=["builtin", "sidecar"], default="builtin")
    p.set_defaults(handler=cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    overrides = {
        key.split("::", 1)[1]: value
        for key, value in vars(args).items()
        if key.startswith("cfg::") and value is not None
    }
    try:
        config = load_config(args.config, overrides=overrides)
    except (ConfigError, OSError) as exc:
        logger.error("config: %s", exc)
        return EXIT_CONFIG
    try:
        return args.handler(args, config)
    except (ConfigError, AuthenticationError, JournalCorruptionError) as exc:
        logger.error("aborted: %s", exc)
        return EXIT_CONFIG
    except (ManifestError, SamplingError, OSError) as exc:
        logger.error("aborted: %s", exc)
        return EXIT_CONFIG


def _provenance(config: PipelineConfig, stage: str, parent: str | None = None) -> dict:
    doc = {
        "pipeline_version": __version__,
        "created_at": created_at(),
        "stage": stage,
        "policies": config.policy_snapshot(),
    }
    if parent:
        doc["parent_manifest"] = parent
    return doc


def _segment_one_file(path: Path, config: PipelineConfig, workspace: Path, vad_client) -> list[SegmentRecord]:
    source_id = path.stem
    buffer = resample(decode_audio(path), config.canonical_rate)
    if vad_client is not None:
        spans = merge_spans(external_vad(buffer, vad_client), config.vad.max_merge_gap_ms / 1000.0)
    else:
        spans = detect_speech(buffer, config.vad)
    spans = split_long_spans(spans, config.length.max_s, frame_energies(buffer, config.vad))

    records = []
    for span in spans:
        clip = extract_span(buffer, span)
        measured = noise_gate(buffer, span, config.noise_gate)
        record = new_record(
            source_id,
            span,
            buffer.sample_rate,
            lead_dbfs=measured.lead_dbfs,
            trail_dbfs=measured.trail_dbfs,
        )
        rel_path = f"clips/{source_id}/{record.id}.wav"
        (workspace / "clips" / source_id).mkdir(parents=True, exist_ok=True)
        write_wav(clip, workspace / rel_path)
        records.append(replace(record, audio_path=rel_path))
    return records


def cmd_segment(args, config: PipelineConfig) -> int:
    input_dir = Path(args.input)
    if not input_dir.is_dir():
        logger.error("input directory %s does not exist", input_dir)
        return EXIT_CONFIG
    files = sorted(p for p in input_dir.iterdir() if p.is_file())
    if not files:
        logger.error("input directory %s contains no files", input_dir)
        return EXIT_CONFIG

    workspace = Path(config.workspace_dir)
    workspace.mkdir(parents=True, exist_ok=True)
    vad_client = None
    if config.vad_backend == "sidecar":
        if not config.sidecar_url:
            raise ConfigError("vad_backend=sidecar requires sidecar_url")
        vad_client = SidecarClient(config.sidecar_url)

    failures = 0
    results: dict[Path, list[SegmentRecord]] = {}
    with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
        futures = {
            pool.submit(_segment_one_file, path, config, workspace, vad_client): path
            for path in files
        }
        for future, path in futures.items():
            try:
                results[path] = future.result()
            except (AudioDecodeError, ServiceError, ValueError) as exc:
                failures += 1
                logger.error("skipped %s: %s", path.name, exc)

    records = [record for path in files if path in results for record in results[path]]
    logger.info(
        "segmented %d/%d files into %d segments", len(results), len(files), len(records)
    )
    save_manifest(records, _provenance(config, "segment", parent=str(input_dir)), args.out)
    return EXIT_DATA_ERRORS if failures else EXIT_OK


def cmd_annotate(args, config: PipelineConfig) -> int:
    if not config.asr.endpoint_url or not config.diacritizer.endpoint_url:
        raise ConfigError("annotate requires asr.endpoint_url and diacritizer.endpoint_url")
    manifest = read_manifest(args.manifest)
    journal = Path(args.journal) if args.journal else Path(config.workspace_dir) / "annotation.journal.jsonl"
    if journal.exists() and not args.resume:
        raise ConfigError(f"journal {journal} exists; pass --resume to continue or remove it")
    checkpoint = Checkpoint.load(journal, override_corruption=args.override_corrupt_journal)

    annotated = run_annotation_batch(
        manifest, config.asr, config.diacritizer, checkpoint, clip_root=config.workspace_dir
    )
    annotated.provenance.update(_provenance(config, "annotate", parent=str(args.manifest)))
    write_manifest(annotated, args.out)
    failed = sum(1 for r in manifest.records if r.id in checkpoint.failed)
    logger.info("annotated %d segments, %d failed", len(annotated.records), failed)
    return EXIT_DATA_ERRORS if failed else EXIT_OK


def cmd_filter(args, config: PipelineConfig) -> int:
    manifest = read_manifest(args.manifest)
    outcome = filter_records(manifest.records, config.noise_gate, config.length)
    provenance = _provenance(config, "filter", parent=str(args.manifest))
    provenance["filter_counts"] = {
        "kept": len(outcome.kept),
        "dropped_noise": outcome.dropped_noise,
        "dropped_length": outcome.dropped_length,
    }
    save_manifest(outcome.kept, provenance, args.out)
    print(
        f"kept={len(outcome.kept)} dropped_noise={outcome.dropped_noise} "
        f"dropped_length={outcome.dropped_length}"
    )
    return EXIT_OK


def cmd_sample(args, config: PipelineConfig) -> int:
    manifest = read_manifest(args.manifest)
    spec = SubsetSpec(
        target_hours=args.target_hours,
        mode=args.mode,
        seed=derive_seed(config.seed, f"sample:{args.mode}:{args.target_hours}"),
        tolerance_fraction=args.tolerance,
    )
    subset = sample_subset(manifest, spec, parent_ref=str(args.manifest))
    subset.provenance.update(_provenance(config, "sample", parent=str(args.manifest)))
    write_manifest(subset, args.out)
    hours = subset.total_seconds() / 3600.0
    print(f"subset_hours={hours:.4f} segments={len(subset.records)} mode={args.mode}")
    return EXIT_OK


def cmd_testset(args, config: PipelineConfig) -> int:
    manifest = read_manifest(args.manifest)
    diarization = read_diarization(args.diarization)
    assigned = assign_speakers(manifest, diarization)
    testset = build_testset(
        manifest,
        assigned,
        n_speakers=args.n_speakers,
        seed=derive_seed(config.seed, "testset"),
        noise_policy=config.noise_gate,
        length_policy=config.length,
    )
    testset.provenance.update(_provenance(config, "testset", parent=str(args.manifest)))
    save_testset(testset, args.out)
    training = exclude_sources(manifest, testset.excluded_sources)
    training.provenance.update(_provenance(config, "testset-exclusion", parent=str(args.manifest)))
    write_manifest(training, args.train_out)
    print(
        f"speakers={len(testset.speakers)} excluded_sources={len(testset.excluded_sources)} "
        f"training_segments={len(training.records)}"
    )
    return EXIT_OK


def cmd_stats(args, config: PipelineConfig) -> int:
    manifest = read_manifest(args.manifest)
    stats = corpus_stats(manifest)
    text = json.dumps(stats.to_dict(), ensure_ascii=False, sort_keys=True, indent=2)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_eval(args, config: PipelineConfig) -> int:
    if not config.asr.endpoint_url:
        raise ConfigError("eval requires asr.endpoint_url for transcription")
    testset = load_testset(args.testset)
    generated_dir = Path(args.generated_dir)
    if not generated_dir.is_dir():
        raise ConfigError(f"generated dir {generated_dir} does not exist")

    generated = {}
    for record in testset.eval_records():
        candidate = generated_dir / f"{record.id}.wav"
        if candidate.exists():
            generated[record.id] = candidate

    if args.embedder == "sidecar":
        if not config.sidecar_url:
            raise ConfigError("embedder=sidecar requires sidecar_url")
        embedder = SidecarEmbedder(SidecarClient(config.sidecar_url))
    else:
        embedder = LogMelEmbedder(sample_rate=config.canonical_rate)

    report = evaluate_testset(
        testset, generated, config.asr, embedder, clip_root=config.workspace_dir
    )
    report.provenance["created_at"] = created_at()
    report.save(args.out)
    print(report.render_table())
    problems = report.missing_count + report.failed_count
    logger.info(
        "evaluated %d utterances (%d missing, %d failed)",
        report.evaluated_count,
        report.missing_count,
        report.failed_count,
    )
    return EXIT_DATA_ERRORS if problems else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
