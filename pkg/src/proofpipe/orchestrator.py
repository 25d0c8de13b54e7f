"""Four-phase pipeline state machine.

Phase 1 explores with a small solver fan-out; while solutions stall, each
outer iteration extracts conjecture pairs from the best attempts, verifies
them by bisection in detached contexts, and feeds the winners back as
lemma memory for guided solving (one solver always stays fresh for
diversity). If the iteration budget runs out unverified, a post-enhancement
pass grades the best candidate independently, runs two extraction sessions
at the softer threshold, and keeps whichever of (incumbent, enhanced)
grades higher on average. Two whole-pipeline runs can be aggregated by a
judge call that must end with an explicit decision tag.

Every step appends to a :class:`RunTrace`; state snapshots at phase
boundaries allow a run to be resumed, and under a scripted backend a
resumed run reproduces the original bit for bit.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Sequence

from .conjecture import ConjectureEngine, ExtractionFailure, VerifyOutcome
from .core import (
    CandidateSolution,
    Origin,
    PipelineConfig,
    Problem,
    RunState,
    best,
    rank,
)
from .dialectic import EMPTY_CONTEXT, DialecticEngine, IdAllocator, SolveContext
from .gateway import BudgetExceeded, ModelGateway, ModelRequest
from .prompts import PromptRegistry
from .trace import SCHEMA_VERSION, RunTrace, first_divergence

STATUS_VERIFIED = "verified"
STATUS_BEST_EFFORT = "best_effort"
STATUS_BUDGET_EXHAUSTED = "budget_exhausted"

_DECISION_RE = re.compile(r"<decision>([AB])</decision>")


class ResumeError(Exception):
    """A checkpoint is missing, corrupt, or from an incompatible setup."""


class ReplayError(Exception):
    """The trace cannot be re-executed (typically: not a scripted run)."""


@dataclass
class PipelineResult:
    solution: Optional[CandidateSolution]
    status: str
    state: RunState
    trace: RunTrace

    @property
    def verified(self) -> bool:
        return self.status == STATUS_VERIFIED


def extract_decision(text: str) -> Optional[str]:
    """The judge's verdict: the last well-formed decision tag wins."""
    matches = _DECISION_RE.findall(text)
    return matches[-1] if matches else None


def select_kth_top(solutions: Sequence[CandidateSolution], k: int) -> SolveContext:
    """Context built from the k-th best distinct solution (1-indexed).

    Fewer than k distinct candidates yields an empty context, which the
    caller treats as a fresh solve.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    graded = [s for s in solutions if s.grade is not None]
    ordered = rank(graded)
    if len(ordered) < k:
        return EMPTY_CONTEXT
    return SolveContext(prior_solutions=(ordered[k - 1],))


def select_top(solutions: Sequence[CandidateSolution], n: int) -> list[CandidateSolution]:
    graded = [s for s in solutions if s.grade is not None]
    return rank(graded)[:n]


def call_ceilings(config: PipelineConfig, runs: int = 1) -> dict[str, int]:
    """Worst-case model-call counts per role for a whole invocation.

    A solve branch costs at most 2 drafts + 1 refine (solver), 1 censor
    (processor) and 2 grades (grader); the ceilings compose that shape
    through every phase, the bisection side-solves, the triple-check
    gates and the judge ladder. Traces must never exceed these.
    """
    k_width = config.solver_width
    l0 = config.initial_iterations
    l_outer = config.conjecture_iterations
    n_rep = config.verify_repeats
    k_pairs = config.extraction_budget

    branches = (
        l0 * k_width
        + l_outer * (2 * k_pairs + k_width)
        + (2 * 2 * k_pairs + k_width)  # post-enhancement: 2 sessions of sides + final fan-out
    )
    check_grades = n_rep * k_width * (l0 + l_outer) + 2 * n_rep
    per_run = {
        "solver": 3 * branches,
        "processor": branches,
        "grader": 2 * branches + check_grades,
        "extractor": l_outer + 2,
        "parser": 2 * (l_outer + 2),
    }
    totals = {role: count * runs for role, count in per_run.items()}
    totals["judge"] = 2 * max(0, runs - 1)
    return totals


class Orchestrator:
    """Drives pipeline runs against one gateway and template registry."""

    def __init__(
        self,
        gateway: ModelGateway,
        registry: PromptRegistry,
        config: PipelineConfig,
        max_workers: int = 1,
    ):
        self.gateway = gateway
        self.registry = registry
        self.config = config
        self.max_workers = max_workers

    # -- public entry points --------------------------------------------------

    def run(self, problem: Problem, trace: Optional[RunTrace] = None, run_id: str = "run1") -> PipelineResult:
        trace = trace if trace is not None else RunTrace()
        self._write_header(trace, problem, mode="single")
        return self._run_single(problem, trace, run_id)

    def run_parallel(
        self, problem: Problem, trace: Optional[RunTrace] = None, n: Optional[int] = None
    ) -> PipelineResult:
        """Aggregate n independent runs (separate states, shared ledger).

        The judge sees both finals plus each run's solution-sequence
        history; a missing decision tag is re-prompted once and then falls
        back to the comparator over the two finals.
        """
        n = n if n is not None else self.config.parallel_runs
        trace = trace if trace is not None else RunTrace()
        if n == 1:
            self._write_header(trace, problem, mode="single")
            return self._run_single(problem, trace, "run1")
        self._write_header(trace, problem, mode="parallel", runs=n)
        results = [self._run_single(problem, trace, f"run{i + 1}") for i in range(n)]
        current = results[0]
        for challenger in results[1:]:
            current = self._judge(problem, current, challenger, trace)
        trace.append(
            "aggregate",
            4,
            "result",
            {
                "status": current.status,
                "solution_id": current.solution.id if current.solution else None,
                "proof_text": current.solution.proof_text if current.solution else None,
            },
        )
        return PipelineResult(current.solution, current.status, current.state, trace)

    def resume(self, source: RunTrace, checkpoint_id: str) -> PipelineResult:
        """Continue a run from a stored snapshot.

        The caller supplies an orchestrator whose gateway wraps a backend
        compatible with the original (for scripted backends: the same
        script). Events after the checkpoint are discarded; under scripted
        backends the continuation reproduces them exactly.
        """
        if checkpoint_id not in source.checkpoints:
            raise ResumeError(f"unknown checkpoint {checkpoint_id!r}")
        snap = source.checkpoints[checkpoint_id]
        try:
            if snap["schema_version"] != SCHEMA_VERSION:
                raise ResumeError(f"snapshot schema {snap['schema_version']} != {SCHEMA_VERSION}")
            if snap["template_version"] != self.registry.version():
                raise ResumeError("checkpoint was taken with different prompt templates")
            position = tuple(snap["position"])
            state = RunState.from_dict(snap["state"])
            s_base = [CandidateSolution.from_dict(d) for d in snap["s_base"]]
            ids = IdAllocator.from_dict(snap["ids"])
            problem = Problem.from_dict(snap["problem"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ResumeError):
                raise
            raise ResumeError(f"corrupt checkpoint: {exc}") from exc
        if state.config.to_dict() != self.config.to_dict():
            raise ResumeError("checkpoint was taken under a different pipeline config")

        self.gateway.restore_accounting(snap["gateway"]["consumed"])
        self.gateway.ledger.restore(snap["ledger"])
        if snap.get("cursors") is not None:
            if not hasattr(self.gateway.backend, "restore"):
                raise ResumeError("snapshot carries scripted cursors but backend is not scripted")
            self.gateway.backend.restore(snap["cursors"])

        trace = RunTrace()
        self._write_header(trace, problem, mode="single", resumed_from=checkpoint_id)
        if position[0] == "final":
            result_payload = snap["result"]
            solution = (
                CandidateSolution.from_dict(result_payload["solution"])
                if result_payload.get("solution")
                else None
            )
            return PipelineResult(solution, result_payload["status"], state, trace)
        return self._machine(problem, trace, state.run_id, state, s_base, ids, position)

    # -- internals -------------------------------------------------------------

    def _write_header(self, trace: RunTrace, problem: Problem, mode: str, runs: int = 1, resumed_from: Optional[str] = None) -> None:
        if trace.header is not None:
            return
        backend = self.gateway.backend
        descriptor: dict = {"kind": "scripted" if hasattr(backend, "snapshot") else "live"}
        if hasattr(backend, "backend_id"):
            descriptor["backend_id"] = backend.backend_id
        trace.append(
            "meta",
            0,
            "run_start",
            {
                "schema_version": SCHEMA_VERSION,
                "mode": mode,
                "runs": runs,
                "problem": problem.to_dict(),
                "config": self.config.to_dict(),
                "backend": descriptor,
                "template_version": self.registry.version(),
                "resumed_from": resumed_from,
            },
        )
        # The script rides along as an attachment: replay needs it, but it is
        # an input, not behavior, so trace comparison skips it.
        if hasattr(backend, "to_dict"):
            trace.append("meta", 0, "script_attachment", {"script": backend.to_dict()})

    def _engines(self, trace: RunTrace, run_id: str, ids: Optional[IdAllocator] = None):
        engine = DialecticEngine(
            self.gateway,
            self.registry,
            self.config,
            trace,
            run_id,
            ids=ids,
            max_workers=self.max_workers,
        )
        return engine, ConjectureEngine(engine)

    def _run_single(self, problem: Problem, trace: RunTrace, run_id: str) -> PipelineResult:
        state = RunState(run_id=run_id, config=self.config)
        return self._machine(problem, trace, run_id, state, [], IdAllocator(run_id), ("p1", 1))

    def _machine(
        self,
        problem: Problem,
        trace: RunTrace,
        run_id: str,
        state: RunState,
        s_base: list[CandidateSolution],
        ids: IdAllocator,
        position: tuple,
    ) -> PipelineResult:
        engine, conj = self._engines(trace, run_id, ids)
        cfg = self.config
        pending: list[CandidateSolution] = []  # completed but not yet filed; salvage on wind-down
        try:
            if position[0] == "p1":
                for i in range(position[1], cfg.initial_iterations + 1):
                    trace.append(run_id, 1, "phase_start", {"phase": 1, "iteration": i})
                    prior = list(s_base)  # contexts come from the previous iteration's memory
                    pending.extend(engine.dialectic_solve(problem, EMPTY_CONTEXT, 1, phase=1, origin=Origin.FRESH))
                    for k in range(1, cfg.solver_width):
                        ctx = select_kth_top(prior, k)
                        origin = Origin.FRESH if ctx.is_empty() else Origin.CONTEXTUAL
                        pending.extend(engine.dialectic_solve(problem, ctx, 1, phase=1, origin=origin))
                    batch = list(pending)
                    pending.clear()
                    s_base.extend(batch)
                    state.bump_phase1()
                    winner = self._check_verified(batch, problem, engine, trace, run_id)
                    if winner is not None:
                        return self._finish(problem, trace, run_id, state, s_base, engine, winner, STATUS_VERIFIED)
                    if i < cfg.initial_iterations:
                        self._checkpoint(trace, problem, run_id, state, s_base, engine, f"p1.i{i}", ("p1", i + 1))
                state.add_solutions(s_base)
                s_base = []
                self._checkpoint(trace, problem, run_id, state, s_base, engine, "p1.done", ("outer", 1))
                position = ("outer", 1)

            if position[0] == "outer":
                for l in range(position[1], cfg.conjecture_iterations + 1):
                    trace.append(run_id, 2, "phase_start", {"phase": 2, "iteration": l})
                    state.bump_conjecture()
                    seeds = select_top(state.solution_memory, 2)
                    outcome: Optional[VerifyOutcome] = None
                    if not seeds:
                        trace.append(run_id, 2, "extract_skipped", {"reason": "no graded seeds"})
                    else:
                        try:
                            extraction = conj.extract_hypotheses(
                                problem,
                                seeds,
                                state.lemma_memory,
                                state.failure_context,
                                phase=2,
                            )
                        except ExtractionFailure as exc:
                            trace.append(run_id, 2, "extraction_failed", {"error": str(exc)})
                            self._checkpoint(
                                trace, problem, run_id, state, s_base, engine, f"outer.l{l}", self._after_outer(l)
                            )
                            continue
                        outcome = conj.verify_hypotheses(extraction.pairs, cfg.tau, phase=2)
                        state.add_lemmas(outcome.proven)
                        state.add_failures(outcome.failed)

                    trace.append(run_id, 3, "phase_start", {"phase": 3, "iteration": l})
                    ctx = self._guided_context(state, outcome)
                    if cfg.solver_width > 1:
                        pending.extend(
                            engine.dialectic_solve(problem, ctx, cfg.solver_width - 1, phase=3, origin=Origin.GUIDED)
                        )
                    pending.extend(engine.dialectic_solve(problem, EMPTY_CONTEXT, 1, phase=3, origin=Origin.FRESH))
                    batch = list(pending)
                    pending.clear()
                    state.add_solutions(batch)
                    winner = self._check_verified(batch, problem, engine, trace, run_id)
                    if winner is not None:
                        return self._finish(problem, trace, run_id, state, s_base, engine, winner, STATUS_VERIFIED)
                    self._checkpoint(trace, problem, run_id, state, s_base, engine, f"outer.l{l}", self._after_outer(l))
                position = ("p4", 0)

            return self._phase4(problem, trace, run_id, state, s_base, engine, conj, pending)
        except BudgetExceeded as exc:
            salvaged = list(pending) + list(exc.partial or [])
            pending.clear()
            state.add_solutions(salvaged)
            pool = state.solution_memory + s_base
            trace.append(
                run_id,
                0,
                "budget_exhausted",
                {"salvaged": len(salvaged), "graded_pool": len([s for s in pool if s.grade])},
                self.gateway.tokens_remaining,
            )
            solution = best(pool) if any(s.grade for s in pool) else None
            return self._finish(
                problem, trace, run_id, state, s_base, engine, solution, STATUS_BUDGET_EXHAUSTED
            )

    def _after_outer(self, l: int) -> tuple:
        return ("outer", l + 1) if l < self.config.conjecture_iterations else ("p4", 0)

    def _guided_context(self, state: RunState, outcome: Optional[VerifyOutcome]) -> SolveContext:
        feedback: list[str] = []
        if outcome:
            cap = self.config.history_char_cap
            for record in outcome.failed:
                feedback.append(f"Unresolved conjecture ({record.reason.value}): {record.conjecture}")
            for attempt in outcome.attempts:
                feedback.append(
                    f"Partial progress on {attempt.pair_id} ({attempt.side}, scored {attempt.score}/7): "
                    + attempt.proof_text[:cap]
                )
        prior: tuple[CandidateSolution, ...] = ()
        graded = [s for s in state.solution_memory if s.grade]
        if graded:
            prior = (best(graded),)
        return SolveContext(lemmas=tuple(state.lemma_memory), feedback=tuple(feedback), prior_solutions=prior)

    def _phase4(self, problem, trace, run_id, state, s_base, engine, conj, pending) -> PipelineResult:
        cfg = self.config
        trace.append(run_id, 4, "phase_start", {"phase": 4})
        graded = [s for s in state.solution_memory if s.grade]
        if not graded:
            return self._finish(problem, trace, run_id, state, s_base, engine, None, STATUS_BEST_EFFORT)
        s_star = best(graded)
        g_check = engine.grade_independent(s_star, problem, cfg.verify_repeats, phase=4)
        if all(g.clean_perfect for g in g_check):
            return self._finish(problem, trace, run_id, state, s_base, engine, s_star, STATUS_VERIFIED)

        check_issue_texts = [i.text for g in g_check for i in g.issues]
        enhance_feedback: list[str] = []
        for session in (1, 2):
            trace.append(run_id, 4, "enhance_session", {"session": session})
            try:
                extraction = conj.extract_hypotheses(
                    problem,
                    [s_star],
                    state.lemma_memory,
                    state.failure_context,
                    extra_reports=check_issue_texts,
                    phase=4,
                )
            except ExtractionFailure as exc:
                trace.append(run_id, 4, "extraction_failed", {"error": str(exc), "session": session})
                continue
            outcome = conj.verify_hypotheses(extraction.pairs, cfg.tau_e, phase=4)
            state.add_lemmas(outcome.proven)
            state.add_failures(outcome.failed)
            for record in outcome.failed:
                enhance_feedback.append(
                    f"Unresolved conjecture ({record.reason.value}): {record.conjecture}"
                )

        ctx = SolveContext(
            lemmas=tuple(state.lemma_memory),
            feedback=tuple(enhance_feedback + check_issue_texts),
            prior_solutions=(s_star,),
        )
        pending.extend(
            engine.dialectic_solve(problem, ctx, cfg.solver_width, phase=4, origin=Origin.POST_ENHANCED)
        )
        batch = list(pending)
        pending.clear()
        state.add_solutions(batch)
        s_better = best(batch)
        g_better = engine.grade_independent(s_better, problem, cfg.verify_repeats, phase=4)

        # argmax over mean independent grades; ties keep the incumbent
        if sum(g.score for g in g_better) > sum(g.score for g in g_check):
            final, final_grades = s_better, g_better
        else:
            final, final_grades = s_star, g_check
        status = STATUS_VERIFIED if all(g.clean_perfect for g in final_grades) else STATUS_BEST_EFFORT
        return self._finish(problem, trace, run_id, state, s_base, engine, final, status)

    def _check_verified(self, batch, problem, engine, trace, run_id) -> Optional[CandidateSolution]:
        """Try the N-consecutive-clean-grades gate on the batch's candidates.

        Only candidates whose inline grade is already a clean 7 are worth
        the extra grader calls; they are tried in comparator order.
        """
        for candidate in rank(batch):
            if candidate.grade is None or not candidate.grade.clean_perfect:
                continue
            trace.append(run_id, candidate.phase, "verify_start", {"solution_id": candidate.id})
            if engine.verified_success(candidate, problem):
                trace.append(
                    run_id,
                    candidate.phase,
                    "verified",
                    {"solution_id": candidate.id, "proof_text": candidate.proof_text},
                )
                return candidate
            trace.append(run_id, candidate.phase, "verify_failed", {"solution_id": candidate.id})
        return None

    def _checkpoint(self, trace, problem, run_id, state, s_base, engine, checkpoint_id: str, position: tuple, result: Optional[dict] = None) -> None:
        snapshot = {
            "schema_version": SCHEMA_VERSION,
            "checkpoint_id": checkpoint_id,
            "position": list(position),
            "template_version": self.registry.version(),
            "problem": problem.to_dict(),
            "state": state.to_dict(),
            "s_base": [s.to_dict() for s in s_base],
            "ids": engine.ids.to_dict(),
            "gateway": {"consumed": self.gateway.tokens_consumed},
            "ledger": [e.to_dict() for e in self.gateway.ledger.entries],
            "cursors": self.gateway.backend.snapshot() if hasattr(self.gateway.backend, "snapshot") else None,
            "result": result,
        }
        phase = {"p1": 1, "outer": 3, "p4": 4, "final": 4}.get(position[0], 0)
        trace.checkpoint(checkpoint_id, snapshot, run_id, phase)

    def _finish(self, problem, trace, run_id, state, s_base, engine, solution, status) -> PipelineResult:
        result_payload = {
            "status": status,
            "solution": solution.to_dict() if solution else None,
        }
        self._checkpoint(
            trace, problem, run_id, state, s_base, engine, f"{run_id}.final", ("final",), result_payload
        )
        trace.append(
            run_id,
            4,
            "result",
            {
                "status": status,
                "solution_id": solution.id if solution else None,
                "proof_text": solution.proof_text if solution else None,
                "score": solution.grade.score if solution and solution.grade else None,
            },
            self.gateway.tokens_remaining,
        )
        return PipelineResult(solution, status, state, trace)

    def _judge(self, problem: Problem, a: PipelineResult, b: PipelineResult, trace: RunTrace) -> PipelineResult:
        if a.solution is None:
            trace.append("aggregate", 4, "judge_fallback", {"reason": "run A produced no solution"})
            return b
        if b.solution is None:
            trace.append("aggregate", 4, "judge_fallback", {"reason": "run B produced no solution"})
            return a

        slots = {
            "problem": problem.statement,
            "solution_a": a.solution.proof_text,
            "solution_b": b.solution.proof_text,
            "additional_materials": self._history_blob(a) + "\n\n" + self._history_blob(b),
        }
        for attempt in range(2):
            prompt = self.registry.render("answer_combiner", slots)
            resp = self.gateway.complete(
                ModelRequest(
                    role="judge",
                    prompt=prompt,
                    temperature=self.config.temperatures.get("judge", 1.0),
                    max_output_tokens=self.config.max_output_tokens,
                    run_id="aggregate",
                )
            )
            decision = extract_decision(resp.text)
            trace.append(
                "aggregate",
                4,
                "judge",
                {
                    "role": "judge",
                    "attempt": attempt,
                    "prompt": prompt,
                    "response": resp.text,
                    "decision": decision,
                    "usage": resp.usage.to_dict(),
                },
                self.gateway.tokens_remaining,
            )
            if decision == "A":
                return a
            if decision == "B":
                return b
        trace.append("aggregate", 4, "judge_fallback", {"reason": "no decision tag after re-prompt"})
        return a if best([a.solution, b.solution]) is a.solution else b

    def _history_blob(self, result: PipelineResult) -> str:
        cap = self.config.history_char_cap
        lines = [f"Solution sequence from pipeline {result.state.run_id}:"]
        for i, sol in enumerate(result.state.solution_memory, 1):
            score = sol.grade.score if sol.grade else "?"
            lines.append(f"--- attempt {i} (phase {sol.phase}, graded {score}/7) ---")
            lines.append(sol.proof_text[:cap])
        return "\n".join(lines)


def replay(original: RunTrace, registry: Optional[PromptRegistry] = None) -> Optional[dict]:
    """Re-execute a scripted trace and report its first divergence.

    Returns None when the re-run is identical. Raises :class:`ReplayError`
    for traces whose backend cannot be reconstructed (live backends).
    """
    from .gateway import ScriptedBackend  # local import keeps module deps one-way

    header = original.header
    if header is None:
        raise ReplayError("trace has no header event")
    attachments = original.of_kind("script_attachment")
    if header.get("backend", {}).get("kind") != "scripted" or not attachments:
        raise ReplayError("only scripted-backend traces can be replayed")
    if header["schema_version"] != SCHEMA_VERSION:
        raise ReplayError(
            f"trace schema {header['schema_version']} is not supported (want {SCHEMA_VERSION})"
        )

    config = PipelineConfig.from_dict(header["config"])
    problem = Problem.from_dict(header["problem"])
    backend = ScriptedBackend.from_dict(attachments[0].payload["script"])
    gateway = ModelGateway(
        backend,
        token_budget=config.token_budget,
        retry_attempts=config.retry_attempts,
        strict_budget=config.strict_budget,
        sleep=lambda _: None,
    )
    registry = registry or PromptRegistry.load()
    if header["template_version"] != registry.version():
        raise ReplayError("trace was produced with different prompt templates")
    orch = Orchestrator(gateway, registry, config)
    fresh = RunTrace()
    if header["mode"] == "parallel":
        orch.run_parallel(problem, trace=fresh, n=header.get("runs", config.parallel_runs))
    else:
        orch.run(problem, trace=fresh)
    return first_divergence(original, fresh)
