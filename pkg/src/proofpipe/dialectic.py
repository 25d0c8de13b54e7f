"""Draft/censor/grade/refine solving loop.

One branch is a fixed chain: draft the proof, run the lazy-phrase censor
over it, re-draft once if the censor objects, grade, refine against the
grade's feedback, re-grade. The refined, re-graded solution is the branch
output. The module also owns grader-transcript parsing and the
N-consecutive-clean-grades acceptance check; it never decides when the
outer loop stops.
"""
from __future__ import annotations

import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Optional

from .core import (
    FALLACY_CAP,
    PERFECT_SCORE,
    CandidateSolution,
    GradeReport,
    Issue,
    Lemma,
    Origin,
    PipelineConfig,
    Problem,
    Severity,
    digest,
)
from .gateway import BudgetExceeded, ModelGateway, ModelRequest
from .prompts import PromptRegistry
from .trace import RunTrace

NO_ISSUES = "NO_ISSUES"
DERIVE_EXPLICITLY = "Derive explicitly"

_BULLET_RE = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*(.+?)\s*$")
_FINAL_GRADE_RE = re.compile(r"Final Grade\W{0,40}?(\d+)", re.IGNORECASE | re.DOTALL)
_BLUEPRINT_MARKERS = ("The Final Blueprint", "Proof_Submitted_for_Review")


class GradeParseFailure(Exception):
    """The grader transcript carried no recognizable final score."""


@dataclass(frozen=True)
class SolveContext:
    """Material injected into a solver call, rendered deterministically.

    Serialization order is fixed (lemmas, then feedback, then prior
    solutions, then scaffolding) so equal contexts hash equally.
    """

    lemmas: tuple[Lemma, ...] = ()
    feedback: tuple[str, ...] = ()
    prior_solutions: tuple[CandidateSolution, ...] = ()
    scaffolding: tuple[str, ...] = ()

    def is_empty(self) -> bool:
        return not (self.lemmas or self.feedback or self.prior_solutions or self.scaffolding)

    def render(self, prior_cap: int = 3) -> str:
        if self.is_empty():
            return ""
        parts: list[str] = []
        if self.lemmas:
            parts.append("[Independently Verified Lemmas]")
            for i, lem in enumerate(self.lemmas, 1):
                parts.append(f"Lemma {i} ({lem.polarity.value}): {lem.statement}")
                parts.append(f"Proof of Lemma {i}: {lem.proof_text}")
        if self.feedback:
            parts.append("[Feedback]")
            parts.extend(f"- {item}" for item in self.feedback)
        if self.prior_solutions:
            parts.append("[Prior Candidate Solutions]")
            for sol in self.prior_solutions[:prior_cap]:
                score = sol.grade.score if sol.grade else "ungraded"
                parts.append(f"Candidate {sol.id} (graded {score}/7):")
                parts.append(sol.proof_text)
        if self.scaffolding:
            parts.append("[Guiding Questions]")
            parts.extend(f"- {q}" for q in self.scaffolding)
        return "\n".join(parts)

    def digest(self, prior_cap: int = 3) -> str:
        return digest(self.render(prior_cap))


EMPTY_CONTEXT = SolveContext()


def split_issue_lines(text: str) -> list[str]:
    """Bullet/numbered lines from a block of grader or censor output."""
    items: list[str] = []
    for line in text.splitlines():
        m = _BULLET_RE.match(line)
        if m and m.group(1):
            items.append(m.group(1))
    return items


def extract_final_proof(solver_output: str) -> str:
    """The reviewer-ready section of a solver transcript, if marked.

    Solver transcripts carry the dialectic log first; the final
    self-contained proof follows the last blueprint marker. Unmarked
    output is taken whole.
    """
    best_idx = -1
    for marker in _BLUEPRINT_MARKERS:
        idx = solver_output.rfind(marker)
        if idx > best_idx:
            best_idx = idx
    if best_idx == -1:
        return solver_output.strip()
    tail = solver_output[best_idx:]
    tail = tail.split("\n", 1)[1] if "\n" in tail else ""
    tail = tail.strip()
    return tail if tail else solver_output.strip()


def parse_grade_transcript(transcript: str) -> GradeReport:
    """Turn a raw grader transcript into a validated report.

    The last "Final Grade"-anchored integer wins (earlier mentions inside
    the grading log are ignored). Issues come from the "Areas for
    Improvement" section; a line tagged Slip is a slip, anything else is
    treated as a fallacy. Scores are coerced where the rubric demands it
    (5 is disallowed, a fallacy caps at 3, a 7 with issues drops to 6) and
    every coercion is recorded in the report's notes.
    """
    matches = list(_FINAL_GRADE_RE.finditer(transcript))
    if not matches:
        raise GradeParseFailure("no Final Grade anchor in grader output")
    score = int(matches[-1].group(1))
    notes: list[str] = []
    if score < 0 or score > 7:
        raise GradeParseFailure(f"final grade {score} outside 0..7")

    issues = tuple(
        Issue(text=t, severity=Severity.SLIP if re.search(r"\bslip\b", t, re.IGNORECASE) else Severity.FALLACY)
        for t in split_issue_lines(_section(transcript, "Areas for Improvement"))
    )
    scaffolding = tuple(split_issue_lines(_section(transcript, "Scaffolding")))

    if score == 5:
        notes.append("score 5 is disallowed; coerced down to 4")
        score = 4
    if any(i.severity is Severity.FALLACY for i in issues) and score > FALLACY_CAP:
        notes.append(f"fallacy present; score capped at {FALLACY_CAP}")
        score = FALLACY_CAP
    if score == PERFECT_SCORE and issues:
        notes.append("perfect score with listed issues; demoted to 6")
        score = 6

    return GradeReport(
        score=score,
        issues=issues,
        scaffolding=scaffolding,
        transcript=transcript,
        notes=tuple(notes),
    )


def _section(transcript: str, header: str) -> str:
    """Text between a named section header and the next bold/section header."""
    pattern = re.compile(re.escape(header) + r"[^\n]*\n(.*?)(?=\n\s*\*\*[A-Z]|\Z)", re.DOTALL | re.IGNORECASE)
    m = pattern.search(transcript)
    return m.group(1) if m else ""


@dataclass
class IdAllocator:
    """Deterministic, zero-padded ids so creation order survives sorting."""

    run_id: str
    counters: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()

    def next(self, kind: str) -> str:
        with self._lock:
            n = self.counters.get(kind, 0)
            self.counters[kind] = n + 1
        return f"{self.run_id}.{kind}{n:04d}"

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "counters": dict(self.counters)}

    @classmethod
    def from_dict(cls, d: dict) -> "IdAllocator":
        return cls(run_id=d["run_id"], counters=dict(d["counters"]))


class DialecticEngine:
    """Executes solve branches and grading against one gateway."""

    def __init__(
        self,
        gateway: ModelGateway,
        registry: PromptRegistry,
        config: PipelineConfig,
        trace: RunTrace,
        run_id: str,
        ids: Optional[IdAllocator] = None,
        max_workers: int = 1,
    ):
        self.gateway = gateway
        self.registry = registry
        self.config = config
        self.trace = trace
        self.run_id = run_id
        self.ids = ids or IdAllocator(run_id)
        self.max_workers = max_workers

    # -- gateway plumbing ---------------------------------------------------

    def _request(self, role: str, template_id: str, slots: dict):
        """Render a template and call the gateway; no trace side effects."""
        prompt = self.registry.render(template_id, slots)
        req = ModelRequest(
            role=role,
            prompt=prompt,
            temperature=self.config.temperatures.get(role, 1.0),
            max_output_tokens=self.config.max_output_tokens,
            run_id=self.run_id,
        )
        return prompt, self.gateway.complete(req)

    def _record(self, phase: int, kind: str, role: str, prompt: str, resp, extra: dict) -> None:
        payload = {
            "role": role,
            "prompt": prompt,
            "response": resp.text,
            "usage": resp.usage.to_dict(),
            **extra,
        }
        self.trace.append(self.run_id, phase, kind, payload, self.gateway.tokens_remaining)

    def _call(self, role: str, template_id: str, slots: dict, phase: int, kind: str, extra: dict):
        prompt, resp = self._request(role, template_id, slots)
        self._record(phase, kind, role, prompt, resp, extra)
        return resp

    def _materials(self, problem: Problem, ctx: SolveContext) -> str:
        parts = []
        if problem.additional_materials:
            parts.append("[Provided Hints]\n" + problem.additional_materials)
        rendered = ctx.render(self.config.memory_prompt_cap)
        if rendered:
            parts.append(rendered)
        return "\n\n".join(parts)

    # -- operations ---------------------------------------------------------

    def lazy_phrase_check(self, proof_text: str, phase: int, branch: int) -> list[str]:
        """Censor pass: empty iff the processor answered exactly NO_ISSUES."""
        resp = self._call(
            "processor",
            "answer_processor",
            {"solution": proof_text},
            phase,
            "censor",
            {"branch": branch},
        )
        text = resp.text.strip()
        if text == NO_ISSUES:
            return []
        items = split_issue_lines(text)
        if items:
            return items
        # Unparseable or free-form objection: keep it opaque, force a re-draft.
        return [text if text else "(unparseable processor response)"]

    def grade(
        self,
        proof_text: str,
        problem: Problem,
        phase: int,
        kind: str = "grade",
        extra: Optional[dict] = None,
        materials: str = "",
    ) -> GradeReport:
        variant = self.config.grader_variant_by_phase.get(phase, self.config.grader_variant)
        prompt, resp = self._request(
            "grader",
            variant,
            {"problem": problem.statement, "solution": proof_text, "additional_materials": materials},
        )
        try:
            report = parse_grade_transcript(resp.text)
        except GradeParseFailure:
            self._record(
                phase,
                kind,
                "grader",
                prompt,
                resp,
                {**(extra or {}), "solution_digest": digest(proof_text), "parse_failure": True},
            )
            raise
        self._record(
            phase,
            kind,
            "grader",
            prompt,
            resp,
            {
                **(extra or {}),
                "solution_digest": digest(proof_text),
                "score": report.score,
                "issue_count": len(report.issues),
                "notes": list(report.notes),
            },
        )
        return report

    def _branch(self, problem: Problem, ctx: SolveContext, branch: int, phase: int, origin: Origin) -> CandidateSolution:
        materials = self._materials(problem, ctx)
        ctx_digest = ctx.digest(self.config.memory_prompt_cap)
        draft_resp = self._call(
            "solver",
            self.config.solver_variant,
            {"problem": problem.statement, "additional_materials": materials},
            phase,
            "draft",
            {"branch": branch, "ctx_digest": ctx_digest, "ctx_empty": ctx.is_empty()},
        )
        proof = extract_final_proof(draft_resp.text)

        censor_issues = self.lazy_phrase_check(proof, phase, branch)
        if censor_issues:
            redraft_ctx = SolveContext(
                lemmas=ctx.lemmas,
                feedback=(DERIVE_EXPLICITLY, *censor_issues),
                prior_solutions=(*ctx.prior_solutions, self._as_solution(problem, proof, phase, origin, ctx_digest)),
                scaffolding=ctx.scaffolding,
            )
            redraft_resp = self._call(
                "solver",
                self.config.solver_variant,
                {"problem": problem.statement, "additional_materials": self._materials(problem, redraft_ctx)},
                phase,
                "draft",
                {"branch": branch, "redraft": True, "ctx_digest": ctx_digest, "ctx_empty": ctx.is_empty()},
            )
            proof = extract_final_proof(redraft_resp.text)

        first_grade = self.grade(proof, problem, phase, "grade", {"branch": branch})

        refine_ctx = SolveContext(
            lemmas=ctx.lemmas,
            feedback=tuple(i.text for i in first_grade.issues) or ("Polish the argument; keep every step explicit.",),
            prior_solutions=(self._as_solution(problem, proof, phase, origin, ctx_digest, first_grade),),
            scaffolding=first_grade.scaffolding,
        )
        refine_resp = self._call(
            "solver",
            self.config.solver_variant,
            {"problem": problem.statement, "additional_materials": self._materials(problem, refine_ctx)},
            phase,
            "refine",
            {"branch": branch},
        )
        refined = extract_final_proof(refine_resp.text)

        final_grade = self.grade(refined, problem, phase, "regrade", {"branch": branch})
        return CandidateSolution(
            id=self.ids.next("s"),
            problem_id=problem.id,
            proof_text=refined,
            origin=origin,
            phase=phase,
            context_digest=ctx_digest,
            grade=final_grade,
            cost_at_creation_micro=int(self.gateway.ledger.grand_total() * Decimal(1_000_000)),
        )

    def _as_solution(self, problem, proof, phase, origin, ctx_digest, grade=None) -> CandidateSolution:
        # Ephemeral wrapper for feeding a draft back into a context; not
        # allocated an id and never stored in memory.
        return CandidateSolution(
            id="draft",
            problem_id=problem.id,
            proof_text=proof,
            origin=origin,
            phase=phase,
            context_digest=ctx_digest,
            grade=grade,
        )

    def dialectic_solve(
        self,
        problem: Problem,
        ctx: SolveContext,
        count: int,
        phase: int,
        origin: Origin,
    ) -> list[CandidateSolution]:
        """Run ``count`` independent branches; results ordered by branch index.

        On budget exhaustion the completed branches ride along on the
        raised :class:`BudgetExceeded` so the orchestrator can salvage them.
        """
        if count < 1:
            raise ValueError("count must be >= 1")
        done: list[CandidateSolution] = []
        if self.max_workers > 1:
            with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
                futures = [
                    pool.submit(self._branch, problem, ctx, b, phase, origin) for b in range(count)
                ]
                try:
                    for fut in futures:
                        done.append(fut.result())
                except BudgetExceeded as exc:
                    raise BudgetExceeded(partial=done) from exc
            return done
        for b in range(count):
            try:
                done.append(self._branch(problem, ctx, b, phase, origin))
            except BudgetExceeded as exc:
                raise BudgetExceeded(partial=done) from exc
        return done

    def verified_success(self, solution: CandidateSolution, problem: Problem, n: Optional[int] = None) -> bool:
        """True iff ``n`` fresh grades in a row are perfect with zero issues.

        Short-circuits on the first miss; every check grade is traced with
        the exact solution text it judged.
        """
        n = n if n is not None else self.config.verify_repeats
        if n < 1:
            raise ValueError("n must be >= 1")
        for ordinal in range(n):
            report = self.grade(
                solution.proof_text,
                problem,
                phase=solution.phase,
                kind="check_grade",
                extra={"solution_id": solution.id, "ordinal": ordinal, "text": solution.proof_text},
            )
            if not report.clean_perfect:
                return False
        return True

    def grade_independent(self, solution: CandidateSolution, problem: Problem, n: int, phase: int) -> list[GradeReport]:
        """N fresh grades with no short-circuit (mean-score comparisons)."""
        return [
            self.grade(
                solution.proof_text,
                problem,
                phase=phase,
                kind="check_grade",
                extra={"solution_id": solution.id, "ordinal": i, "text": solution.proof_text},
            )
            for i in range(n)
        ]
