import random

import pytest

from ttscorpus.audio import TimeSpan
from ttscorpus.curation import build_manifest, new_record, write_manifest
from ttscorpus.sampler import (
    DiarizedSpan,
    SamplingError,
    SpeakerTestset,
    SubsetSpec,
    TestsetSpec,
    assign_speakers,
    build_testset,
    exclude_sources,
    load_testset,
    read_diarization,
    sample_subset,
    save_testset,
)

RATE = 16000


def synthetic_corpus(n_sources=10, hours_each=1.0, seg_s=12.0):
    """n_sources files, hours_each of seg_s-long segments per file."""
    records = []
    per_source = int(hours_each * 3600 / seg_s)
    for s in range(n_sources):
        for i in range(per_source):
            start = i * (seg_s + 2.0)
            span = TimeSpan(start, start + seg_s)
            records.append(
                new_record(
                    f"source-{s:02d}", span, RATE,
                    audio_path=f"clips/s{s}-{i}.wav",
                    lead_dbfs=-120.0, trail_dbfs=-120.0,
                )
            )
    return build_manifest(records, {"pipeline_version": "test"})


class TestSampleSubset:
    @pytest.mark.parametrize("mode", ["random", "max-diversity", "min-diversity"])
    def test_budget_within_tolerance(self, mode):
        manifest = synthetic_corpus()
        spec = SubsetSpec(target_hours=3.0, mode=mode, seed=7)
        subset = sample_subset(manifest, spec)
        hours = subset.total_seconds() / 3600.0
        assert abs(hours - 3.0) <= 0.02 * 3.0

    def test_deterministic_same_seed(self, tmp_path):
        manifest = synthetic_corpus()
        spec = SubsetSpec(target_hours=2.0, mode="random", seed=99)
        a, b = sample_subset(manifest, spec), sample_subset(manifest, spec)
        pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_manifest(a, pa)
        write_manifest(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_seed_changes_selection(self):
        manifest = synthetic_corpus()
        a = sample_subset(manifest, SubsetSpec(target_hours=1.0, seed=1))
        b = sample_subset(manifest, SubsetSpec(target_hours=1.0, seed=2))
        assert [r.id for r in a.records] != [r.id for r in b.records]

    def test_max_diversity_touches_all_sources(self):
        manifest = synthetic_corpus()
        subset = sample_subset(manifest, SubsetSpec(target_hours=3.0, mode="max-diversity", seed=3))
        assert len({r.source_id for r in subset.records}) == 10

    def test_min_diversity_uses_fewest_sources(self):
        manifest = synthetic_corpus()
        subset = sample_subset(manifest, SubsetSpec(target_hours=3.0, mode="min-diversity", seed=3))
        assert len({r.source_id for r in subset.records}) == 3

    def test_diversity_ordering_property(self):
        # distinct sources under max-diversity >= under min-diversity, always
        rng = random.Random(5)
        for trial in range(5):
            n_sources = rng.randint(3, 12)
            manifest = synthetic_corpus(n_sources=n_sources, hours_each=rng.uniform(0.2, 0.6))
            target = 0.5 * n_sources * 0.2
            max_div = sample_subset(manifest, SubsetSpec(target_hours=target, mode="max-diversity", seed=trial))
            min_div = sample_subset(manifest, SubsetSpec(target_hours=target, mode="min-diversity", seed=trial))
            assert len({r.source_id for r in max_div.records}) >= len(
                {r.source_id for r in min_div.records}
            )

    def test_subset_is_subset_of_parent(self):
        manifest = synthetic_corpus()
        subset = sample_subset(manifest, SubsetSpec(target_hours=2.0, seed=11))
        parent_ids = {r.id for r in manifest.records}
        assert {r.id for r in subset.records} <= parent_ids

    def test_insufficient_corpus(self):
        manifest = synthetic_corpus(n_sources=1, hours_each=0.5)
        with pytest.raises(SamplingError):
            sample_subset(manifest, SubsetSpec(target_hours=2.0))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SubsetSpec(target_hours=0.0)
        with pytest.raises(ValueError):
            SubsetSpec(target_hours=1.0, tolerance_fraction=0.5)
        with pytest.raises(ValueError):
            SubsetSpec(target_hours=1.0, mode="sideways")


class TestExcludeSources:
    def test_empty_exclusion_keeps_all(self):
        manifest = synthetic_corpus(n_sources=3)
        out = exclude_sources(manifest, set())
        assert out.records == manifest.records

    def test_exclude_all(self):
        manifest = synthetic_corpus(n_sources=3)
        out = exclude_sources(manifest, {f"source-{i:02d}" for i in range(3)})
        assert out.records == []

    def test_partition(self):
        manifest = synthetic_corpus(n_sources=4)
        excluded = {"source-01", "source-03"}
        out = exclude_sources(manifest, excluded)
        dropped = [r for r in manifest.records if r.source_id in excluded]
        assert len(out.records) + len(dropped) == len(manifest.records)
        assert {r.source_id for r in out.records}.isdisjoint(excluded)


def speaker_corpus(speaker_sizes, seg_s=5.0):
    """One source per speaker with the given number of usable segments."""
    records, diarized = [], {}
    for idx, (speaker, count) in enumerate(speaker_sizes.items()):
        source = f"file-{idx:02d}"
        entries = []
        for i in range(count):
            start = i * 10.0
            record = new_record(
                source, TimeSpan(start, start + seg_s), RATE,
                audio_path=f"clips/{source}-{i}.wav", lead_dbfs=-120.0, trail_dbfs=-120.0,
            )
            records.append(record)
            entries.append((speaker, record))
        diarized[source] = entries
    return build_manifest(records, {"pipeline_version": "test"}), diarized


class TestBuildTestset:
    def test_shape_five_speakers(self):
        manifest, diarized = speaker_corpus({f"spk{i}": 12 for i in range(5)})
        testset = build_testset(manifest, diarized, n_speakers=5, seed=1)
        assert len(testset.speakers) == 5
        for entry in testset.speakers:
            assert len(entry.eval_segments) == 10
            ids = {entry.prompt.id} | {r.id for r in entry.eval_segments}
            assert len(ids) == 11
            assert entry.prompt.speaker_id == entry.speaker_id
        assert len(testset.excluded_sources) == 5

    def test_exactly_eleven_ineligible(self):
        manifest, diarized = speaker_corpus({"spk0": 11, **{f"spk{i}": 12 for i in range(1, 6)}})
        testset = build_testset(manifest, diarized, n_speakers=5, seed=1)
        assert all(e.speaker_id != "spk0" for e in testset.speakers)
        with pytest.raises(SamplingError):
            build_testset(manifest, diarized, n_speakers=6, seed=1)

    def test_gates_applied_to_candidates(self):
        # 12 segments but one too short: speaker drops to 11 usable -> ineligible
        manifest, diarized = speaker_corpus({"spkA": 12, "spkB": 12})
        source = "file-00"
        speaker, record = diarized[source][0]
        import dataclasses

        short = dataclasses.replace(record, duration_s=1.0, end_s=record.start_s + 1.0)
        diarized[source][0] = (speaker, short)
        records = [short if r.id == record.id else r for r in manifest.records]
        manifest = build_manifest(records, manifest.provenance)
        with pytest.raises(SamplingError):
            build_testset(manifest, diarized, n_speakers=2, seed=1)

    def test_contamination_exclusion(self):
        manifest, diarized = speaker_corpus({f"spk{i}": 12 for i in range(5)})
        testset = build_testset(manifest, diarized, n_speakers=3, seed=5)
        training = exclude_sources(manifest, testset.excluded_sources)
        assert {r.source_id for r in training.records}.isdisjoint(testset.excluded_sources)

    def test_deterministic(self):
        manifest, diarized = speaker_corpus({f"spk{i}": 14 for i in range(8)})
        a = build_testset(manifest, diarized, n_speakers=4, seed=42)
        b = build_testset(manifest, diarized, n_speakers=4, seed=42)
        assert [e.speaker_id for e in a.speakers] == [e.speaker_id for e in b.speakers]
        assert [e.prompt.id for e in a.speakers] == [e.prompt.id for e in b.speakers]

    def test_full_scale_59_speaker_shape(self):
        # the production shape: 59 speakers x (1 prompt + 10 eval)
        manifest, diarized = speaker_corpus({f"spk{i:03d}": 13 for i in range(70)})
        testset = build_testset(manifest, diarized, n_speakers=59, seed=3)
        assert len(testset.speakers) == 59
        assert all(len(e.eval_segments) == 10 for e in testset.speakers)
        assert len(testset.excluded_sources) == 59

    def test_save_load_round_trip(self, tmp_path):
        manifest, diarized = speaker_corpus({f"spk{i}": 12 for i in range(5)})
        testset = build_testset(manifest, diarized, n_speakers=5, seed=1)
        path = tmp_path / "testset.json"
        save_testset(testset, path)
        back = load_testset(path)
        assert back.excluded_sources == testset.excluded_sources
        assert [e.speaker_id for e in back.speakers] == [e.speaker_id for e in testset.speakers]
        assert back.speakers[0].prompt == testset.speakers[0].prompt

    def test_spec_validation(self):
        manifest, diarized = speaker_corpus({"spk0": 12})
        testset = build_testset(manifest, diarized, n_speakers=1, seed=0)
        entry = testset.speakers[0]
        with pytest.raises(ValueError):
            TestsetSpec(
                speakers=[SpeakerTestset(entry.speaker_id, entry.prompt, entry.eval_segments[:9])],
                excluded_sources=testset.excluded_sources,
            )
        with pytest.raises(ValueError):
            TestsetSpec(speakers=testset.speakers, excluded_sources=set())


class TestAssignSpeakers:
    def test_overlap_assignment(self):
        manifest, _ = speaker_corpus({"ignored": 3}, seg_s=5.0)
        source = "file-00"
        diarization = [
            DiarizedSpan(source, "alice", 0.0, 6.0),      # covers record 0 fully
            DiarizedSpan(source, "bob", 10.0, 12.0),       # 2 of 5 s of record 1: below half
            DiarizedSpan(source, "alice", 20.0, 22.0),     # record 2: alice 2 s...
            DiarizedSpan(source, "bob", 22.0, 25.0),       # ... bob 3 s -> bob wins
        ]
        assigned = assign_speakers(manifest, diarization)
        pairs = {(speaker, record.start_s) for speaker, record in assigned[source]}
        assert ("alice", 0.0) in pairs
        assert all(start != 10.0 for _, start in pairs)
        assert ("bob", 20.0) in pairs

    def test_no_diarization_for_source(self):
        manifest, _ = speaker_corpus({"x": 2})
        assert assign_speakers(manifest, []) == {}

    def test_read_diarization(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(
            '{"source_id":"f","speaker_id":"s1","start_s":0.0,"end_s":2.5}\n'
            '{"source_id":"f","speaker_id":"s2","start_s":3.0,"end_s":4.0}\n',
            encoding="utf-8",
        )
        spans = read_diarization(path)
        assert spans == [
            DiarizedSpan("f", "s1", 0.0, 2.5),
            DiarizedSpan("f", "s2", 3.0, 4.0),
        ]
        bad = tmp_path / "bad.jsonl"
        bad.write_text("oops\n", encoding="utf-8")
        with pytest.raises(SamplingError):
            read_diarization(bad)
