from __future__ import annotations

import hashlib
import json
import math
import shutil

import pytest

from conftest import make_conversation
from mind2.backend import GenerationConfig, MockBackend, \
    mock_extraction_backend, mock_generation_backend
from mind2.corpus import save_jsonl
from mind2.errors import BackendError
from mind2.linearize import AblationMask, standard_ablation_grid
from mind2.runner import (RunError, RunSpec, run_ablation_grid,
                          run_fraction_sweep, run_generation)


def fixture_conversations():
    convs = []
    for i in range(3):
        convs.append(make_conversation(
            conv_id=f"fix-{i}",
            situation=f"money trouble case {i}",
            turns=[
                ("User", f"I am losing sleep over my debts, case {i}."),
                ("System", f"How long has this been weighing on you, case {i}?",
                 "Question"),
                ("User", f"About two months now, and it keeps growing, case {i}."),
                ("System", f"That sounds like a heavy burden to carry, case {i}.",
                 "Reflection of Feelings"),
            ],
        ))
    return convs


@pytest.fixture
def fixture_corpus(tmp_path):
    path = tmp_path / "corpus.jsonl"
    save_jsonl(fixture_conversations(), path)
    return path


def base_spec(fixture_corpus, tmp_path, **overrides):
    defaults = dict(
        corpus_path=str(fixture_corpus),
        fraction=1.0,
        seed=7,
        window_span=5,
        output_dir=str(tmp_path / "out"),
    )
    defaults.update(overrides)
    return RunSpec(**defaults)


def artifact_digest(out_dir):
    digest = hashlib.sha256()
    for name in ("predictions.jsonl", "report.json", "report.txt"):
        digest.update((out_dir / name).read_bytes())
    return digest.hexdigest()


class TestRunSpec:
    def test_json_round_trip(self, fixture_corpus, tmp_path):
        spec = base_spec(fixture_corpus, tmp_path,
                         mask=AblationMask(True, False, True),
                         generation=GenerationConfig(top_p=0.5))
        path = tmp_path / "spec.json"
        spec.save(path)
        assert RunSpec.from_file(path) == spec


class TestRunGeneration:
    def test_deterministic_across_executions(self, fixture_corpus, tmp_path):
        digests = set()
        out_dir = tmp_path / "out"
        for _ in range(3):
            if out_dir.exists():
                shutil.rmtree(out_dir)
            spec = base_spec(fixture_corpus, tmp_path)
            artifacts = run_generation(spec)
            digests.add(artifact_digest(artifacts.output_dir))
        assert len(digests) == 1

    def test_predictions_cover_evaluated_turns(self, fixture_corpus, tmp_path):
        spec = base_spec(fixture_corpus, tmp_path)
        artifacts = run_generation(spec)
        # one test conversation, two supporter turns with history
        assert len(artifacts.predictions) == 2
        for row in artifacts.predictions:
            assert set(row) == {"conversation_id", "turn", "omega",
                                "generated_text", "strategy", "response",
                                "flags"}

    def test_all_false_mask_keeps_markers_out_of_requests(
            self, fixture_corpus, tmp_path):
        generation = mock_generation_backend()
        spec = base_spec(fixture_corpus, tmp_path, mask=AblationMask.none())
        run_generation(spec, generation_backend=generation)
        assert generation.call_log
        for prompt in generation.call_log:
            omega = prompt.split("\n\n")[-1]
            for marker in ("[mind]", "[util]", "[prnt]"):
                assert marker not in omega

    def test_reference_echo_hits_metric_upper_bounds(self, fixture_corpus,
                                                     tmp_path):
        spec = base_spec(fixture_corpus, tmp_path,
                         generation_backend="mock-echo")
        artifacts = run_generation(spec)
        report = artifacts.report
        assert report.f1 == pytest.approx(1.0)
        assert report.b2 == pytest.approx(1.0)
        assert report.b4 == pytest.approx(1.0)
        assert report.rl == pytest.approx(1.0)

    def test_scoring_backend_fills_ppl(self, fixture_corpus, tmp_path):
        spec = base_spec(fixture_corpus, tmp_path, scoring_backend="mock")
        scoring = mock_generation_backend(logprob=math.log(0.25))
        artifacts = run_generation(spec, scoring_backend=scoring)
        assert artifacts.report.ppl == pytest.approx(4.0)
        assert artifacts.report.metadata["scoring_backend"] == "mock"

    def test_no_scoring_backend_means_ppl_unavailable(self, fixture_corpus,
                                                      tmp_path):
        artifacts = run_generation(base_spec(fixture_corpus, tmp_path))
        assert artifacts.report.ppl is None

    def test_error_budget_enforced(self, fixture_corpus, tmp_path):
        class FailingBackend(MockBackend):
            def complete(self, prompt, config, want_logprobs=False):
                raise BackendError("synthetic outage")

        spec = base_spec(fixture_corpus, tmp_path, error_budget=0.05)
        with pytest.raises(RunError):
            run_generation(spec, generation_backend=FailingBackend())

    def test_errors_within_budget_are_recorded(self, fixture_corpus, tmp_path):
        calls = {"n": 0}

        class FlakyBackend(MockBackend):
            def complete(self, prompt, config, want_logprobs=False):
                calls["n"] += 1
                if calls["n"] == 1:
                    raise BackendError("first call fails")
                return super().complete(prompt, config, want_logprobs)

        spec = base_spec(fixture_corpus, tmp_path, error_budget=0.6)
        artifacts = run_generation(
            spec, generation_backend=FlakyBackend(
                default=mock_generation_backend().default))
        assert len(artifacts.errors) == 1
        assert len(artifacts.predictions) == 1

    def test_eval_scope_final_only(self, fixture_corpus, tmp_path):
        spec = base_spec(fixture_corpus, tmp_path, eval_scope="final")
        artifacts = run_generation(spec)
        assert len(artifacts.predictions) == 1
        assert artifacts.predictions[0]["turn"] == 4


class TestAblationGrid:
    def test_seven_reports_with_shared_cache(self, fixture_corpus, tmp_path):
        shared_extraction = mock_extraction_backend()
        spec = base_spec(fixture_corpus, tmp_path)
        result = run_ablation_grid(spec, None,
                                   extraction_backend=shared_extraction)
        assert len(result.rows) == 7
        assert result.rows[-1][0] == "full"
        # Extraction ran once: later runs hit the shared cache.
        cold = mock_extraction_backend()
        cold_dir = tmp_path / "cold"
        run_generation(base_spec(fixture_corpus, tmp_path,
                                 output_dir=str(cold_dir)),
                       extraction_backend=cold)
        assert shared_extraction.call_count == cold.call_count

    def test_single_full_mask_matches_plain_run(self, fixture_corpus, tmp_path):
        spec = base_spec(fixture_corpus, tmp_path)
        result = run_ablation_grid(spec, [AblationMask.full()])
        plain = run_generation(base_spec(fixture_corpus, tmp_path,
                                         output_dir=str(tmp_path / "plain")))
        assert result.rows[0][1].scaled() == plain.report.scaled()

    def test_identical_masks_identical_reports(self, fixture_corpus, tmp_path):
        spec = base_spec(fixture_corpus, tmp_path)
        result = run_ablation_grid(spec, [AblationMask.full(),
                                          AblationMask.full()])
        assert result.rows[0][1].scaled() == result.rows[1][1].scaled()

    def test_mask_marker_presence_matches_grid(self, fixture_corpus, tmp_path):
        spec = base_spec(fixture_corpus, tmp_path)
        for i, mask in enumerate(standard_ablation_grid()):
            generation = mock_generation_backend()
            run_generation(
                base_spec(fixture_corpus, tmp_path,
                          output_dir=str(tmp_path / f"m{i}"), mask=mask),
                generation_backend=generation)
            for prompt in generation.call_log:
                omega = prompt.split("\n\n")[-1]
                assert ("[mind]" in omega) == mask.include_btm
                assert ("[util]" in omega) == mask.include_peu
                assert ("[prnt]" in omega) == mask.include_bcr


class TestFractionSweep:
    def test_five_fractions_four_rc_rows(self, fixture_corpus, tmp_path):
        spec = base_spec(fixture_corpus, tmp_path)
        result = run_fraction_sweep(spec, [0.10, 0.25, 0.50, 0.75, 1.0])
        assert len(result.rows) == 5
        assert len(result.rc_rows()) == 4
        assert result.baseline_fraction == 0.10

    def test_single_fraction_no_rc_rows(self, fixture_corpus, tmp_path):
        spec = base_spec(fixture_corpus, tmp_path)
        result = run_fraction_sweep(spec, [1.0])
        assert result.rc_rows() == []

    def test_out_of_range_fraction_rejected(self, fixture_corpus, tmp_path):
        spec = base_spec(fixture_corpus, tmp_path)
        with pytest.raises(ValueError):
            run_fraction_sweep(spec, [0.0, 1.0])

    def test_train_sizes_recorded_nested(self, fixture_corpus, tmp_path):
        # 3 conversations -> train part of 2; fractions scale that count.
        spec = base_spec(fixture_corpus, tmp_path)
        result = run_fraction_sweep(spec, [0.5, 1.0])
        sizes = [report.metadata["train_conversations"]
                 for _, report in result.rows]
        assert sizes == [1, 2]
