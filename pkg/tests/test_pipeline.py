import json
import shutil

import numpy as np
import pytest
import torch

from outpainter.backends import RecordingBackend, StubBackend, TranscriptBackend
from outpainter.canvas import Direction, image_digest, masked_width
from outpainter.conditioning import AblationFlags
from outpainter.config import RunConfig
from outpainter.pipeline import (
    RECORDS_NAME,
    TrainingRecord,
    build_models,
    continue_expansion,
    derive_seed,
    expand,
    load_pairs,
    load_records,
    load_state,
    make_synthetic_pairs,
    prepare_dataset,
    replay,
    save_state,
    train,
)
from outpainter.validation import (
    BackendError,
    ExpansionError,
    GeometryError,
    TrainingError,
    ValidationError,
)

from conftest import random_image


class TestSeedDerivation:
    def test_deterministic_and_in_range(self):
        a = derive_seed(0, "train", 3)
        assert a == derive_seed(0, "train", 3)
        assert 0 <= a < 2 ** 63

    def test_distinct_roles_and_indices(self):
        seeds = {derive_seed(0, "train", i) for i in range(50)}
        seeds |= {derive_seed(0, "perm", i) for i in range(50)}
        assert len(seeds) == 100

    def test_part_boundaries_are_not_ambiguous(self):
        assert derive_seed(0, "ab", "c") != derive_seed(0, "a", "bc")


class TestRecordStore:
    def test_record_json_roundtrip(self):
        record = TrainingRecord("images/x.png", "top", (1, 3), "g", "l",
                                {"backend": "stub"})
        assert TrainingRecord.from_json(record.to_json()) == record

    def test_synthetic_pairs_layout(self, pairs_dir):
        triples = load_pairs(pairs_dir)
        assert len(triples) == 6
        for name, image, caption in triples:
            assert image.shape == (32, 32, 3)
            assert " over a " in caption

    def test_synthetic_pairs_deterministic(self, tmp_path):
        make_synthetic_pairs(tmp_path / "a", 3, size=16, seed=5)
        make_synthetic_pairs(tmp_path / "b", 3, size=16, seed=5)
        for name in ("annotations.jsonl", "pair_00000.png"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_prepare_writes_four_records_per_pair(self, record_store):
        records = load_records(record_store)
        assert len(records) == 24
        by_image = {}
        for record in records:
            by_image.setdefault(record.image_ref, []).append(record.direction)
        expected_order = [d.value for d in Direction]
        for directions in by_image.values():
            assert directions == expected_order

    def test_training_local_caption_is_the_annotated_one(self, record_store, pairs_dir):
        annotated = {name: caption for name, _, caption in load_pairs(pairs_dir)}
        for record in load_records(record_store):
            name = record.image_ref.split("/")[-1]
            assert record.local_caption == annotated[name]
            assert record.global_caption.startswith("summary:")
            assert len(record.provenance["imagined_locals"]) == 4
            assert record.provenance["strip_width"] == masked_width(32, record.ratio)

    def test_prepare_is_restartable(self, pairs_dir, tmp_path):
        pairs = load_pairs(pairs_dir)
        store = tmp_path / "store"
        first = prepare_dataset(pairs, 2, StubBackend(), store)
        assert first["captioned"] == 6 and first["records_written"] == 24
        before = (store / RECORDS_NAME).read_bytes()
        second = prepare_dataset(pairs, 2, StubBackend(), store)
        assert second["already_done"] == 6
        assert second["captioned"] == 0 and second["records_written"] == 0
        assert (store / RECORDS_NAME).read_bytes() == before

    def test_backend_failures_skip_but_do_not_abort(self, pairs_dir, tmp_path):
        pairs = load_pairs(pairs_dir)
        needle = pairs[2][2]

        class Refusing(StubBackend):
            name = "refusing"

            def complete_text(self, prompt):
                if needle in prompt:
                    raise BackendError("refused")
                return super().complete_text(prompt)

        summary = prepare_dataset(pairs, 2, Refusing(), tmp_path / "store",
                                  retries=2, backoff=0.0)
        assert summary["captioned"] == 5
        assert summary["records_written"] == 20
        assert [item["image"] for item in summary["skipped"]] == [pairs[2][0]]
        refs = {r.image_ref for r in load_records(tmp_path / "store")}
        assert f"images/{pairs[2][0]}" not in refs
        assert not (tmp_path / "store" / "images" / pairs[2][0]).exists()

    def test_transcript_replay_reproduces_the_store(self, pairs_dir, tmp_path):
        pairs = load_pairs(pairs_dir)
        transcript = tmp_path / "transcript.jsonl"
        prepare_dataset(pairs, 3, RecordingBackend(StubBackend(), transcript),
                        tmp_path / "a", retries=1, backoff=0.0)
        prepare_dataset(pairs, 3, TranscriptBackend(transcript),
                        tmp_path / "b", retries=1, backoff=0.0)

        def rows(store):
            out = []
            for record in load_records(store):
                data = json.loads(record.to_json())
                data["provenance"].pop("backend")
                out.append(data)
            return out

        assert rows(tmp_path / "a") == rows(tmp_path / "b")
        for name, _, _ in pairs:
            assert (tmp_path / "a" / "images" / name).read_bytes() == \
                (tmp_path / "b" / "images" / name).read_bytes()

    def test_unnamed_pairs_get_stable_names(self, rng, tmp_path):
        pairs = [(random_image(rng), "a plain field")]
        prepare_dataset(pairs, 2, StubBackend(), tmp_path / "store")
        refs = {r.image_ref for r in load_records(tmp_path / "store")}
        assert refs == {"images/pair_00000.png"}

    def test_load_records_validation(self, tmp_path):
        with pytest.raises(ValidationError):
            load_records(tmp_path)
        (tmp_path / RECORDS_NAME).write_text("\n")
        with pytest.raises(ValidationError):
            load_records(tmp_path)


class TestBuildModels:
    def test_initialization_is_seed_deterministic(self, toy_config):
        a = build_models(toy_config)
        b = build_models(toy_config)
        for key, value in a.denoiser.state_dict().items():
            assert torch.equal(value, b.denoiser.state_dict()[key])
        for key, value in a.conditioner.state_dict().items():
            assert torch.equal(value, b.conditioner.state_dict()[key])

    def test_context_wiring(self, toy_config):
        bundle = build_models(toy_config)
        assert bundle.denoiser.config.context_len == bundle.conditioner.context_len
        assert bundle.denoiser.config.context_len == 2 * toy_config.tokens


class TestTraining:
    def test_outputs_and_hook_payload(self, record_store, tmp_path):
        config = RunConfig(train_steps=4, batch_size=8)
        seen = []
        checkpoint = train(record_store, tmp_path / "run", config, hook=seen.append)
        assert checkpoint.exists()
        assert (tmp_path / "run" / "config.json").exists()
        log_lines = (tmp_path / "run" / "training_log.jsonl").read_text().splitlines()
        assert len(log_lines) == 4
        assert [json.loads(line)["step"] for line in log_lines] == [0, 1, 2, 3]
        assert json.loads(log_lines[3])["epoch"] == 1  # 24 records / batch 8

        assert len(seen) == 4
        for entry in seen:
            assert entry["visual_source"] == "kept_strip"
            assert len(entry["visual_digests"]) == 8
            assert entry["context"].shape == (8, 2 * config.tokens, config.embed_dim)

    def test_visual_ablation_zeroes_context_rows_every_step(self, record_store, tmp_path):
        config = RunConfig(train_steps=3, batch_size=8)
        seen = []
        train(record_store, tmp_path / "run", config,
              flags=AblationFlags(use_visual=False), hook=seen.append)
        for entry in seen:
            ctx = entry["context"]
            assert torch.all(ctx[:, :config.tokens] == 0)
            assert torch.any(ctx[:, config.tokens:] != 0)

    def test_training_is_deterministic(self, record_store, tmp_path):
        config = RunConfig(train_steps=6, batch_size=8)
        a = train(record_store, tmp_path / "a", config)
        b = train(record_store, tmp_path / "b", config)
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a" / "training_log.jsonl").read_text() == \
            (tmp_path / "b" / "training_log.jsonl").read_text()

    def test_resume_matches_uninterrupted_run(self, record_store, tmp_path):
        config = RunConfig(train_steps=10, batch_size=8)
        full = train(record_store, tmp_path / "full", config)
        partial = train(record_store, tmp_path / "split", config, steps=5)
        resumed = train(record_store, tmp_path / "split", config, resume=partial)
        assert resumed.read_bytes() == full.read_bytes()
        assert (tmp_path / "split" / "training_log.jsonl").read_text() == \
            (tmp_path / "full" / "training_log.jsonl").read_text()

    def test_resume_rejects_config_drift(self, record_store, tmp_path):
        config = RunConfig(train_steps=4, batch_size=8)
        checkpoint = train(record_store, tmp_path / "run", config)
        other = RunConfig(train_steps=4, batch_size=8, learning_rate=1e-3)
        with pytest.raises(ValidationError, match="different config"):
            train(record_store, tmp_path / "run2", other, resume=checkpoint)

    def test_failures_name_the_batch(self, record_store, tmp_path, monkeypatch):
        def explode(*args, **kwargs):
            raise TrainingError("loss is not finite")

        monkeypatch.setattr("outpainter.pipeline.train_step", explode)
        config = RunConfig(train_steps=2, batch_size=8)
        with pytest.raises(TrainingError, match=r"step 0 .*images/"):
            train(record_store, tmp_path / "run", config)


class TestExpansion:
    def test_zero_steps_returns_the_input(self, trained_run, rng):
        image = random_image(rng)
        state = expand(image, "a quiet field", 0, "right", StubBackend(),
                       trained_run["checkpoint"])
        assert np.array_equal(state.canvas.image, image)
        assert state.step_log == []

    def test_canvas_grows_by_shift_per_step(self, trained_run, rng):
        image = random_image(rng)
        state = expand(image, "a quiet field", 3, "right", StubBackend(),
                       trained_run["checkpoint"], seed=1)
        assert state.canvas.image.shape == (32, 32 + 3 * 16, 3)
        up = expand(image, "a quiet field", 2, "top", StubBackend(),
                    trained_run["checkpoint"], seed=1)
        assert up.canvas.image.shape == (32 + 2 * 16, 32, 3)

    def test_same_seed_reproduces_bit_exactly(self, trained_run, rng):
        image = random_image(rng)
        a = expand(image, "a quiet field", 2, "right", StubBackend(),
                   trained_run["checkpoint"], seed=7)
        b = expand(image, "a quiet field", 2, "right", StubBackend(),
                   trained_run["checkpoint"], seed=7)
        assert np.array_equal(a.canvas.image, b.canvas.image)
        c = expand(image, "a quiet field", 2, "right", StubBackend(),
                   trained_run["checkpoint"], seed=8)
        assert not np.array_equal(a.canvas.image, c.canvas.image)

    def test_one_backend_call_per_step(self, trained_run, rng):
        backend = StubBackend()
        expand(random_image(rng), "a quiet field", 3, "right", backend,
               trained_run["checkpoint"])
        assert backend.multimodal_calls == 3

    def test_local_ablation_needs_no_backend(self, trained_run, rng):
        state = expand(random_image(rng), "a quiet field", 2, "right", None,
                       trained_run["checkpoint"],
                       flags=AblationFlags(use_local=False))
        assert all(entry.local_caption == "" for entry in state.step_log)
        assert state.canvas.image.shape == (32, 64, 3)

    def test_earlier_strips_are_never_rewritten(self, trained_run, rng):
        image = random_image(rng)
        short = expand(image, "a quiet field", 2, "right", StubBackend(),
                       trained_run["checkpoint"], seed=3)
        frozen = short.canvas.image.copy()
        digests = [entry.canvas_digest for entry in short.step_log]
        longer = continue_expansion(short, 2, "right", StubBackend(),
                                    trained_run["checkpoint"])
        assert np.array_equal(longer.canvas.image[:, :frozen.shape[1]], frozen)
        assert [e.canvas_digest for e in longer.step_log[:2]] == digests

    def test_continue_equals_one_longer_run(self, trained_run, rng):
        image = random_image(rng)
        direct = expand(image, "a quiet field", 3, "right", StubBackend(),
                        trained_run["checkpoint"], seed=5)
        stepped = expand(image, "a quiet field", 1, "right", StubBackend(),
                         trained_run["checkpoint"], seed=5)
        stepped = continue_expansion(stepped, 2, "right", StubBackend(),
                                     trained_run["checkpoint"])
        assert np.array_equal(direct.canvas.image, stepped.canvas.image)

    def test_mixed_direction_plan_on_one_axis(self, trained_run, rng):
        state = expand(random_image(rng), "a quiet field", 2, ["right", "left"],
                       StubBackend(), trained_run["checkpoint"])
        assert state.canvas.image.shape == (32, 64, 3)
        assert state.plan == ["right", "left"]
        with pytest.raises(ValidationError):
            expand(random_image(rng), "a quiet field", 2, ["right"],
                   StubBackend(), trained_run["checkpoint"])

    def test_cross_axis_plans_are_rejected(self, trained_run, rng):
        # the denoiser window is a fixed square, so once the canvas has grown
        # along one axis it can no longer expand along the other
        with pytest.raises(GeometryError, match="cross-extent"):
            expand(random_image(rng), "a quiet field", 2, ["right", "top"],
                   StubBackend(), trained_run["checkpoint"])

    def test_input_validation(self, trained_run, rng):
        with pytest.raises(ValidationError):
            expand(random_image(rng, 16, 16), "a field", 1, "right",
                   StubBackend(), trained_run["checkpoint"])
        with pytest.raises(ValidationError):
            expand(random_image(rng), "   ", 1, "right", StubBackend(),
                   trained_run["checkpoint"])
        with pytest.raises(ValidationError):
            expand(random_image(rng), "a field", -1, "right", StubBackend(),
                   trained_run["checkpoint"])

    def test_backend_failure_carries_partial_state(self, trained_run, rng):
        class FailsAfterOne(StubBackend):
            def complete_multimodal(self, image, prompt):
                if self.multimodal_calls >= 1:
                    self.multimodal_calls += 1
                    raise BackendError("down")
                return super().complete_multimodal(image, prompt)

        with pytest.raises(ExpansionError) as info:
            expand(random_image(rng), "a quiet field", 3, "right",
                   FailsAfterOne(), trained_run["checkpoint"], seed=2)
        assert info.value.step == 1
        partial = info.value.state
        assert len(partial.step_log) == 1
        assert partial.canvas.image.shape == (32, 48, 3)

    def test_hook_sees_the_whole_canvas(self, trained_run, rng):
        seen = []
        expand(random_image(rng), "a quiet field", 2, "right", StubBackend(),
               trained_run["checkpoint"], hook=seen.append)
        assert [entry["visual_source"] for entry in seen] == ["full_canvas"] * 2
        assert seen[0]["visual_shape"] == (32, 32)
        assert seen[1]["visual_shape"] == (32, 48)
        assert seen[0]["context"].shape[-1] == 32


class TestStateAndReplay:
    @pytest.fixture()
    def expanded(self, trained_run, rng):
        image = random_image(rng)
        state = expand(image, "a quiet field at dusk", 2, "right", StubBackend(),
                       trained_run["checkpoint"], seed=4)
        return state

    def test_state_roundtrip(self, expanded, tmp_path):
        save_state(expanded, tmp_path / "state")
        loaded = load_state(tmp_path / "state")
        assert np.array_equal(loaded.canvas.image, expanded.canvas.image)
        assert np.array_equal(loaded.input_image, expanded.input_image)
        assert loaded.step_log == expanded.step_log
        assert loaded.flags == expanded.flags
        assert loaded.checkpoint_digest == expanded.checkpoint_digest

    def test_state_detects_canvas_tampering(self, expanded, tmp_path):
        save_state(expanded, tmp_path / "state")
        canvas = np.load(tmp_path / "state" / "canvas.npy")
        canvas[0, 0, 0] = 1.0 - canvas[0, 0, 0]
        np.save(tmp_path / "state" / "canvas.npy", canvas)
        with pytest.raises(ValidationError, match="digest"):
            load_state(tmp_path / "state")

    def test_replay_is_bit_exact_without_a_backend(self, expanded, trained_run):
        seen = []
        canvas = replay(expanded, trained_run["checkpoint"], hook=seen.append)
        assert np.array_equal(canvas.image, expanded.canvas.image)
        assert all(entry["visual_source"] == "full_canvas" for entry in seen)

    def test_replay_flags_a_tampered_caption(self, expanded, trained_run, tmp_path):
        save_state(expanded, tmp_path / "state")
        info = json.loads((tmp_path / "state" / "state.json").read_text())
        info["step_log"][1]["local_caption"] = "something else entirely"
        (tmp_path / "state" / "state.json").write_text(json.dumps(info))
        tampered = load_state(tmp_path / "state")
        with pytest.raises(ValidationError, match="diverged at step 1"):
            replay(tampered, trained_run["checkpoint"])

    def test_checkpoint_mismatch_is_rejected(self, expanded, trained_run, tmp_path):
        other = tmp_path / "other.npz"
        shutil.copy(trained_run["checkpoint"], other)
        with other.open("ab") as fh:
            fh.write(b"\0")
        with pytest.raises(ValidationError, match="checkpoint"):
            replay(expanded, other)
        with pytest.raises(ValidationError, match="checkpoint"):
            continue_expansion(expanded, 1, "right", StubBackend(), other)
