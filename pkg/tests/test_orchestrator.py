"""End-to-end pipeline behavior on scripted scenarios."""
import re

import pytest

from proofpipe.gateway import ScriptRule
from proofpipe.orchestrator import (
    STATUS_BEST_EFFORT,
    STATUS_BUDGET_EXHAUSTED,
    STATUS_VERIFIED,
    Orchestrator,
    ResumeError,
    call_ceilings,
    extract_decision,
    replay,
    select_kth_top,
    select_top,
)
from proofpipe.trace import RunTrace, first_divergence

from conftest import (
    BREAKTHROUGH_TEXT,
    PLATEAU_TEXT,
    clean_problem,
    grader_text,
    make_gateway,
    rules_all_twos,
    rules_clean,
    rules_well,
    small_config,
    well_problem,
)
from test_core import sol


def run_pipeline(rules, config, registry, problem=None, parallel=False, n=None):
    gateway = make_gateway(rules, config)
    orch = Orchestrator(gateway, registry, config)
    trace = RunTrace(clock=lambda: 0.0)
    problem = problem or clean_problem()
    if parallel:
        result = orch.run_parallel(problem, trace=trace, n=n)
    else:
        result = orch.run(problem, trace=trace)
    return result, gateway


class TestSelectors:
    def test_kth_top_orders_by_comparator(self):
        memory = [sol("A", 7), sol("B", 6), sol("C", 4)]
        ctx = select_kth_top(memory, 2)
        assert ctx.prior_solutions[0].id == "B"

    def test_kth_beyond_pool_is_empty_context(self):
        assert select_kth_top([sol("A", 6)], 3).is_empty()
        assert select_kth_top([], 1).is_empty()

    def test_select_top_of_empty(self):
        assert select_top([], 2) == []

    def test_select_top_dedupes(self):
        memory = [sol("A", 7, text="same"), sol("B", 6, text="same"), sol("C", 4)]
        top = select_top(memory, 2)
        assert [s.id for s in top] == ["A", "C"]


class TestInstantSuccess:
    def test_verifies_in_phase_one(self, registry):
        result, gateway = run_pipeline(rules_clean(), small_config(), registry)
        assert result.status == STATUS_VERIFIED
        assert result.solution.grade.clean_perfect
        trace = result.trace
        assert trace.count("extract") == 0  # no conjecture machinery touched
        phases = [e.payload["phase"] for e in trace.of_kind("phase_start")]
        assert phases == [1]
        assert trace.count("check_grade") == 3

    def test_verified_soundness_three_consecutive_clean_grades(self, registry):
        result, _ = run_pipeline(rules_clean(), small_config(), registry)
        text = result.solution.proof_text
        checks = [
            e
            for e in result.trace.of_kind("check_grade")
            if e.payload.get("text") == text
        ]
        assert len(checks) >= 3
        assert all(e.payload["score"] == 7 and e.payload["issue_count"] == 0 for e in checks[-3:])


class TestCognitiveWell:
    def test_full_pipeline_escapes(self, registry):
        config = small_config(conjecture_iterations=2)
        result, _ = run_pipeline(rules_well(), config, registry, problem=well_problem())
        assert result.status == STATUS_VERIFIED
        assert result.solution.proof_text == BREAKTHROUGH_TEXT
        # the negative lemma is what unlocked the breakthrough
        lemmas = result.state.lemma_memory
        assert len(lemmas) == 1 and lemmas[0].polarity.value == "negative"

    def test_ablated_pipeline_stays_in_the_well(self, registry):
        config = small_config(conjecture_iterations=0)
        result, _ = run_pipeline(rules_well(), config, registry, problem=well_problem())
        assert result.status == STATUS_BEST_EFFORT
        assert result.solution.grade.score == 6
        assert result.solution.proof_text == PLATEAU_TEXT

    def test_phase_order_regular(self, registry):
        config = small_config(conjecture_iterations=2)
        result, _ = run_pipeline(rules_well(), config, registry, problem=well_problem())
        phases = "".join(str(e.payload["phase"]) for e in result.trace.of_kind("phase_start"))
        assert re.fullmatch(r"1+(23)*4?", phases)

    def test_diversity_one_fresh_solve_per_phase3(self, registry):
        config = small_config(conjecture_iterations=2)
        result, _ = run_pipeline(rules_well(), config, registry, problem=well_problem())
        trace = result.trace
        phase3_iters = [e for e in trace.of_kind("phase_start") if e.payload["phase"] == 3]
        drafts_p3 = [
            e
            for e in trace.of_kind("draft")
            if e.phase == 3 and not e.payload.get("redraft")
        ]
        fresh = [e for e in drafts_p3 if e.payload["ctx_empty"]]
        assert len(phase3_iters) >= 1
        assert len(fresh) == len(phase3_iters)


class TestPhaseFour:
    def test_all_twos_ends_via_post_enhancement(self, registry):
        config = small_config(initial_iterations=1, conjecture_iterations=1)
        result, _ = run_pipeline(rules_all_twos(), config, registry)
        assert result.status == STATUS_BEST_EFFORT
        assert result.solution.grade.score == 2
        phases = [e.payload["phase"] for e in result.trace.of_kind("phase_start")]
        assert phases[-1] == 4
        assert result.trace.count("enhance_session") == 2
        # argmax over equal means keeps the incumbent
        result_event = result.trace.of_kind("result")[-1]
        assert result_event.payload["score"] == 2

    def test_phase4_all_perfect_is_verified(self, registry):
        # plateau at 6 during the loop, but independent checks give clean 7s
        rules = [
            ScriptRule("solver", None, [{"text": "LUCKY_PROOF"}], repeat_last=True),
            ScriptRule("processor", None, [{"text": "NO_ISSUES"}], repeat_last=True),
            ScriptRule(
                "grader",
                None,
                [
                    {"text": grader_text(6, issues=(("gap", "Slip"),))},  # grade
                    {"text": grader_text(6, issues=(("gap", "Slip"),))},  # regrade
                    {"text": grader_text(6, issues=(("gap", "Slip"),))},  # grade b2
                    {"text": grader_text(6, issues=(("gap", "Slip"),))},  # regrade b2
                    {"text": grader_text(7)},
                    {"text": grader_text(7)},
                    {"text": grader_text(7)},
                ],
                repeat_last=True,
            ),
        ]
        config = small_config(initial_iterations=1, conjecture_iterations=0)
        result, _ = run_pipeline(rules, config, registry)
        assert result.status == STATUS_VERIFIED
        assert result.trace.count("enhance_session") == 0


class TestJudge:
    CASES = [
        ("analysis...\n<decision>A</decision>", "A"),
        ("analysis...\n<decision>B</decision>", "B"),
        ("<decision>A</decision> early, but final call:\n<decision>B</decision>", "B"),
        ("<decision>B</decision>\ntrailing prose\n<decision>A</decision>", "A"),
        ("no tag at all", None),
        ("<decision>C</decision>", None),
        ("<decision>a</decision>", None),  # case-sensitive contract
        ("<decision> A </decision>", None),  # exact format, no padding
        ("<decision>A</decision><decision>A</decision>", "A"),
        ("deep analysis\n\n<decision>B</decision>\n", "B"),
    ]

    def test_decision_corpus(self):
        for text, expected in self.CASES:
            assert extract_decision(text) == expected, text

    def _two_run_rules(self, decision_texts):
        # run1 produces ALPHA (verified), run2 produces ALPHA too; judge scripted
        return rules_clean() + [
            ScriptRule("judge", None, [{"text": t} for t in decision_texts], repeat_last=True)
        ]

    def test_parallel_runs_judge_b(self, registry):
        config = small_config(parallel_runs=2)
        result, _ = run_pipeline(
            self._two_run_rules(["verdict\n<decision>B</decision>"]),
            config,
            registry,
            parallel=True,
            n=2,
        )
        assert result.state.run_id == "run2"
        judge_events = result.trace.of_kind("judge")
        assert len(judge_events) == 1
        assert judge_events[0].payload["decision"] == "B"

    def test_judge_last_tag_wins_in_pipeline(self, registry):
        config = small_config(parallel_runs=2)
        result, _ = run_pipeline(
            self._two_run_rules(["<decision>B</decision> but on reflection\n<decision>A</decision>"]),
            config,
            registry,
            parallel=True,
            n=2,
        )
        assert result.state.run_id == "run1"

    def test_missing_tag_reprompts_then_falls_back(self, registry):
        config = small_config(parallel_runs=2)
        result, _ = run_pipeline(
            self._two_run_rules(["no tag here", "still no tag"]),
            config,
            registry,
            parallel=True,
            n=2,
        )
        trace = result.trace
        assert trace.count("judge") == 2
        assert trace.count("judge_fallback") == 1
        assert result.solution is not None

    def test_single_run_no_judge(self, registry):
        config = small_config(parallel_runs=1)
        result, _ = run_pipeline(rules_clean(), config, registry, parallel=True, n=1)
        assert result.trace.count("judge") == 0
        assert result.status == STATUS_VERIFIED

    def test_three_runs_single_elimination_ladder(self, registry):
        config = small_config(parallel_runs=3)
        # round 1: (run1, run2) -> B; round 2: (run2, run3) -> A
        result, _ = run_pipeline(
            self._two_run_rules(["<decision>B</decision>", "<decision>A</decision>"]),
            config,
            registry,
            parallel=True,
            n=3,
        )
        assert result.trace.count("judge") == 2
        assert result.state.run_id == "run2"

    def test_judge_history_materials_mention_both_runs(self, registry):
        config = small_config(parallel_runs=2)
        result, _ = run_pipeline(
            self._two_run_rules(["<decision>A</decision>"]), config, registry, parallel=True, n=2
        )
        prompt = result.trace.of_kind("judge")[0].payload["prompt"]
        assert "pipeline run1" in prompt and "pipeline run2" in prompt


class TestBudget:
    def test_budget_exhaustion_returns_best_partial(self, registry):
        config = small_config(token_budget=12_000)
        result, gateway = run_pipeline(rules_well(), config, registry, problem=well_problem())
        assert result.status == STATUS_BUDGET_EXHAUSTED
        assert gateway.tokens_consumed <= config.token_budget + config.max_output_tokens
        assert result.trace.count("budget_exhausted") == 1

    def test_budget_monotone_in_trace(self, registry):
        config = small_config(conjecture_iterations=1)
        result, _ = run_pipeline(rules_well(), config, registry, problem=well_problem())
        remaining = [
            e.budget_remaining for e in result.trace.events if e.budget_remaining is not None
        ]
        assert all(a >= b for a, b in zip(remaining, remaining[1:]))

    @pytest.mark.parametrize("budget", [1, 700, 2500, 6000, 11_000, 17_500])
    def test_random_tiny_budgets_bounded_overshoot(self, budget, registry):
        config = small_config(token_budget=budget)
        result, gateway = run_pipeline(rules_well(), config, registry, problem=well_problem())
        assert result.status in (STATUS_BUDGET_EXHAUSTED, STATUS_VERIFIED)
        assert gateway.tokens_consumed <= budget + config.max_output_tokens
        # a result is still produced (possibly None when nothing completed)
        assert result.trace.of_kind("result")


class TestCeilings:
    def test_trace_counts_within_planner_ceilings(self, registry):
        config = small_config(conjecture_iterations=2)
        result, gateway = run_pipeline(rules_well(), config, registry, problem=well_problem())
        ceilings = call_ceilings(config, runs=1)
        by_role = {}
        for entry in gateway.ledger.entries:
            by_role[entry.role] = by_role.get(entry.role, 0) + 1
        for role, count in by_role.items():
            assert count <= ceilings[role], role

    def test_ceilings_all_twos(self, registry):
        config = small_config(initial_iterations=1, conjecture_iterations=1)
        result, gateway = run_pipeline(rules_all_twos(), config, registry)
        ceilings = call_ceilings(config, runs=1)
        by_role = {}
        for entry in gateway.ledger.entries:
            by_role[entry.role] = by_role.get(entry.role, 0) + 1
        for role, count in by_role.items():
            assert count <= ceilings[role], role


class TestResume:
    def _fresh_orchestrator(self, config, registry):
        gateway = make_gateway(rules_well(), config)
        return Orchestrator(gateway, registry, config), gateway

    def test_resume_every_checkpoint_reproduces_run(self, registry):
        config = small_config(initial_iterations=2, conjecture_iterations=2)
        original, orig_gateway = run_pipeline(
            rules_well(), config, registry, problem=well_problem()
        )
        baseline_ledger = orig_gateway.ledger.to_dict()
        checkpoint_ids = [c for c in original.trace.checkpoints if not c.endswith(".final")]
        assert checkpoint_ids, "expected mid-run checkpoints"
        for checkpoint_id in checkpoint_ids:
            orch, gateway = self._fresh_orchestrator(config, registry)
            resumed = orch.resume(original.trace, checkpoint_id)
            assert resumed.solution.proof_text == original.solution.proof_text, checkpoint_id
            assert gateway.ledger.to_dict() == baseline_ledger, checkpoint_id

    def test_resume_from_final_returns_stored(self, registry):
        config = small_config()
        original, _ = run_pipeline(rules_well(), config, registry, problem=well_problem())
        orch, gateway = self._fresh_orchestrator(config, registry)
        resumed = orch.resume(original.trace, "run1.final")
        assert resumed.solution.proof_text == original.solution.proof_text
        assert gateway.tokens_consumed > 0  # accounting restored, no re-execution
        assert resumed.status == original.status

    def test_unknown_checkpoint(self, registry):
        config = small_config()
        original, _ = run_pipeline(rules_well(), config, registry, problem=well_problem())
        orch, _ = self._fresh_orchestrator(config, registry)
        with pytest.raises(ResumeError):
            orch.resume(original.trace, "nope")

    def test_template_version_guard(self, registry, tmp_path):
        from proofpipe.prompts import PromptRegistry

        config = small_config()
        original, _ = run_pipeline(rules_well(), config, registry, problem=well_problem())
        override = tmp_path / "solver.txt"
        override.write_text("changed {{slot:problem}}", encoding="utf-8")
        other_registry = PromptRegistry.load(overrides={"solver": override})
        gateway = make_gateway(rules_well(), config)
        orch = Orchestrator(gateway, other_registry, config)
        with pytest.raises(ResumeError, match="template"):
            orch.resume(original.trace, "p1.done")

    def test_corrupt_checkpoint(self, registry):
        config = small_config()
        original, _ = run_pipeline(rules_well(), config, registry, problem=well_problem())
        snap = dict(original.trace.checkpoints["p1.done"])
        del snap["state"]
        original.trace.checkpoints["broken"] = snap
        orch, _ = self._fresh_orchestrator(config, registry)
        with pytest.raises(ResumeError, match="corrupt"):
            orch.resume(original.trace, "broken")

    def test_config_mismatch_guard(self, registry):
        config = small_config()
        original, _ = run_pipeline(rules_well(), config, registry, problem=well_problem())
        other = small_config(solver_width=3)
        gateway = make_gateway(rules_well(), other)
        orch = Orchestrator(gateway, registry, other)
        with pytest.raises(ResumeError, match="config"):
            orch.resume(original.trace, "p1.done")


class TestReplay:
    def test_identical_replay(self, registry):
        config = small_config(conjecture_iterations=1)
        result, _ = run_pipeline(rules_well(), config, registry, problem=well_problem())
        assert replay(result.trace, registry=registry) is None

    def test_mutated_script_diverges_at_matching_event(self, registry):
        config = small_config(conjecture_iterations=1)
        result, _ = run_pipeline(rules_well(), config, registry, problem=well_problem())
        # flip the plateau grader verdict to a 4: first grade event diverges
        script = result.trace.of_kind("script_attachment")[0].payload["script"]
        for rule in script["rules"]:
            if rule["role"] == "grader" and rule["match"] is None:
                rule["responses"] = [{"text": grader_text(4, issues=(("hole", "Fallacy"),))}]
        divergence = replay(result.trace, registry=registry)
        assert divergence is not None
        diverged_kind = divergence["expected"]["kind"]
        assert diverged_kind in ("grade", "regrade", "check_grade")
        compared = [e for e in result.trace.events if e.kind != "script_attachment"]
        first_grade_idx = next(i for i, e in enumerate(compared) if e.kind == "grade")
        assert divergence["index"] == first_grade_idx

    def test_live_trace_refused(self, registry):
        config = small_config()
        result, _ = run_pipeline(rules_clean(), config, registry)
        header = result.trace.header
        header["backend"] = {"kind": "live"}
        from proofpipe.orchestrator import ReplayError

        with pytest.raises(ReplayError):
            replay(result.trace, registry=registry)

    def test_deterministic_signature(self, registry):
        config = small_config(conjecture_iterations=1)
        a, _ = run_pipeline(rules_well(), config, registry, problem=well_problem())
        b, _ = run_pipeline(rules_well(), config, registry, problem=well_problem())
        assert first_divergence(a.trace, b.trace) is None
