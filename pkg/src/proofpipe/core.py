"""Shared domain types for the solving pipeline.

Everything here is plain data: no I/O, no model calls. Types are immutable
values except :class:`RunState`, which is mutated only by the orchestrator
(single writer; readers may snapshot). Every type serializes to a canonical
JSON dict via ``to_dict`` / ``from_dict`` — that dict is the schema used by
the run-trace log.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Optional

VALID_SCORES = frozenset({0, 1, 2, 3, 4, 6, 7})  # 5 is disallowed by the rubric
PERFECT_SCORE = 7
FALLACY_CAP = 3


class Origin(str, Enum):
    FRESH = "fresh"
    CONTEXTUAL = "contextual"
    GUIDED = "guided"
    POST_ENHANCED = "post_enhanced"


class Severity(str, Enum):
    SLIP = "slip"
    FALLACY = "fallacy"


class Polarity(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class FailureReason(str, Enum):
    AMBIGUOUS = "ambiguous"      # neither side cleanly won the bisection
    UNRESOLVED = "unresolved"    # a model/grading failure prevented a verdict


def canonical_json(payload: Any) -> str:
    """Stable serialization: sorted keys, no whitespace drift."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def digest(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Problem:
    """A problem statement plus optional unverified hint material."""

    id: str
    statement: str
    additional_materials: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.statement or not self.statement.strip():
            raise ValueError("problem statement must be non-empty")
        if not self.id:
            raise ValueError("problem id must be non-empty")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "statement": self.statement,
            "additional_materials": self.additional_materials,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Problem":
        return cls(
            id=d["id"],
            statement=d["statement"],
            additional_materials=d.get("additional_materials"),
        )


@dataclass(frozen=True)
class Issue:
    text: str
    severity: Severity

    def to_dict(self) -> dict:
        return {"text": self.text, "severity": self.severity.value}

    @classmethod
    def from_dict(cls, d: dict) -> "Issue":
        return cls(text=d["text"], severity=Severity(d["severity"]))


@dataclass(frozen=True)
class GradeReport:
    """A parsed grading verdict on the 0-7 scale.

    Construction enforces the rubric's shape: 5 is never a valid stored
    score, a perfect 7 cannot carry issues, and the presence of any fallacy
    caps the score at 3. Upstream parsers must coerce before constructing;
    coercions are recorded in ``notes`` so no information is silently lost.
    """

    score: int
    issues: tuple[Issue, ...] = ()
    scaffolding: tuple[str, ...] = ()
    transcript: str = ""
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.score not in VALID_SCORES:
            raise ValueError(f"score {self.score} not in {sorted(VALID_SCORES)}")
        if self.score == PERFECT_SCORE and self.issues:
            raise ValueError("a perfect score cannot carry issues")
        if any(i.severity is Severity.FALLACY for i in self.issues) and self.score > FALLACY_CAP:
            raise ValueError(f"a fallacy caps the score at {FALLACY_CAP}")

    @property
    def clean_perfect(self) -> bool:
        return self.score == PERFECT_SCORE and not self.issues

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "issues": [i.to_dict() for i in self.issues],
            "scaffolding": list(self.scaffolding),
            "transcript": self.transcript,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GradeReport":
        return cls(
            score=d["score"],
            issues=tuple(Issue.from_dict(i) for i in d.get("issues", [])),
            scaffolding=tuple(d.get("scaffolding", [])),
            transcript=d.get("transcript", ""),
            notes=tuple(d.get("notes", [])),
        )


@dataclass(frozen=True)
class CandidateSolution:
    """A proof attempt with provenance: which phase and context produced it.

    ``cost_at_creation_micro`` is the ledger grand total (micro-USD) at the
    moment the solution was produced; it feeds the deterministic tie-break
    in :func:`best`.
    """

    id: str
    problem_id: str
    proof_text: str
    origin: Origin
    phase: int
    context_digest: str
    grade: Optional[GradeReport] = None
    cost_at_creation_micro: int = 0

    def __post_init__(self) -> None:
        if not self.proof_text:
            raise ValueError("proof_text must be non-empty")
        if self.phase not in (1, 2, 3, 4):
            raise ValueError(f"phase must be 1..4, got {self.phase}")

    def with_grade(self, grade: GradeReport) -> "CandidateSolution":
        return replace(self, grade=grade)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "problem_id": self.problem_id,
            "proof_text": self.proof_text,
            "origin": self.origin.value,
            "phase": self.phase,
            "context_digest": self.context_digest,
            "grade": self.grade.to_dict() if self.grade else None,
            "cost_at_creation_micro": self.cost_at_creation_micro,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateSolution":
        return cls(
            id=d["id"],
            problem_id=d["problem_id"],
            proof_text=d["proof_text"],
            origin=Origin(d["origin"]),
            phase=d["phase"],
            context_digest=d["context_digest"],
            grade=GradeReport.from_dict(d["grade"]) if d.get("grade") else None,
            cost_at_creation_micro=d.get("cost_at_creation_micro", 0),
        )


@dataclass(frozen=True)
class HypothesisPair:
    """A self-contained conjecture and its self-contained negation.

    The pair is stored and verified atomically; neither text may refer back
    to the proof it was extracted from.
    """

    id: str
    conjecture: str
    negation: str
    source_solution_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.conjecture.strip() or not self.negation.strip():
            raise ValueError("conjecture and negation must both be non-empty")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "conjecture": self.conjecture,
            "negation": self.negation,
            "source_solution_ids": list(self.source_solution_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HypothesisPair":
        return cls(
            id=d["id"],
            conjecture=d["conjecture"],
            negation=d["negation"],
            source_solution_ids=tuple(d.get("source_solution_ids", [])),
        )


@dataclass(frozen=True)
class Lemma:
    """A bisection-verified statement: exactly one side cleared the bar."""

    statement: str
    polarity: Polarity
    proof_text: str
    g_pos: int
    g_neg: int
    pair_id: str
    threshold: int = PERFECT_SCORE

    def __post_init__(self) -> None:
        pos_won = self.g_pos >= self.threshold
        neg_won = self.g_neg >= self.threshold
        if pos_won == neg_won:
            raise ValueError("exactly one side of a stored lemma must clear the threshold")
        if (self.polarity is Polarity.POSITIVE) != pos_won:
            raise ValueError("lemma polarity does not match the winning side")

    def to_dict(self) -> dict:
        return {
            "statement": self.statement,
            "polarity": self.polarity.value,
            "proof_text": self.proof_text,
            "g_pos": self.g_pos,
            "g_neg": self.g_neg,
            "pair_id": self.pair_id,
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Lemma":
        return cls(
            statement=d["statement"],
            polarity=Polarity(d["polarity"]),
            proof_text=d["proof_text"],
            g_pos=d["g_pos"],
            g_neg=d["g_neg"],
            pair_id=d["pair_id"],
            threshold=d.get("threshold", PERFECT_SCORE),
        )


@dataclass(frozen=True)
class FailureRecord:
    """A bisection pair that yielded no lemma, and why."""

    pair_id: str
    conjecture: str
    reason: FailureReason
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "conjecture": self.conjecture,
            "reason": self.reason.value,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FailureRecord":
        return cls(
            pair_id=d["pair_id"],
            conjecture=d["conjecture"],
            reason=FailureReason(d["reason"]),
            detail=d.get("detail", ""),
        )


# Default per-role sampling temperatures: generation roles run warmer than
# verification roles. The "uniform" profile sets every role to 1.0.
TEMPERATURE_PROFILES: dict[str, dict[str, float]] = {
    "split": {
        "solver": 0.6,
        "extractor": 0.6,
        "grader": 0.1,
        "parser": 0.1,
        "processor": 0.1,
        "judge": 0.1,
    },
    "uniform": {
        "solver": 1.0,
        "extractor": 1.0,
        "grader": 1.0,
        "parser": 1.0,
        "processor": 1.0,
        "judge": 1.0,
    },
}


@dataclass
class PipelineConfig:
    """Tunable knobs for a pipeline run.

    Defaults are the standard full-strength profile: width 4, three outer
    conjecture iterations, perfect-score threshold 7 with enhancement
    threshold 6, triple-check verification, a three-pair extraction budget
    and two aggregated parallel runs.
    """

    initial_iterations: int = 1          # L0: phase-1 exploration rounds
    conjecture_iterations: int = 3       # L: outer extract/verify/solve rounds
    solver_width: int = 4                # K: solutions per round
    tau: int = 7                         # acceptance threshold
    tau_e: int = 6                       # post-enhancement threshold
    verify_repeats: int = 3              # N: consecutive clean grades required
    extraction_budget: int = 3           # k: max conjecture pairs per extraction
    parallel_runs: int = 2
    token_budget: int = 8_000_000
    max_output_tokens: int = 32_768
    temperatures: dict[str, float] = field(
        default_factory=lambda: dict(TEMPERATURE_PROFILES["split"])
    )
    price_table: dict[str, dict[str, str]] = field(default_factory=dict)
    retry_attempts: int = 3
    strict_budget: bool = False          # reserve max_output_tokens before each call
    memory_prompt_cap: int = 3           # prior solutions serialized into any prompt
    history_char_cap: int = 4000         # per-solution cap in judge history material
    grader_variant: str = "grader_simplified"   # inner-loop grader template
    grader_variant_by_phase: dict[int, str] = field(default_factory=dict)
    solver_variant: str = "solver"

    def __post_init__(self) -> None:
        if self.solver_width < 1:
            raise ValueError("solver_width must be >= 1")
        if not (self.tau_e < self.tau <= PERFECT_SCORE):
            raise ValueError("need tau_e < tau <= 7")
        if self.token_budget <= 0:
            raise ValueError("token_budget must be positive")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")
        if self.initial_iterations < 0 or self.conjecture_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.verify_repeats < 1:
            raise ValueError("verify_repeats must be >= 1")
        if self.extraction_budget < 1:
            raise ValueError("extraction_budget must be >= 1")
        if self.parallel_runs < 1:
            raise ValueError("parallel_runs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "initial_iterations": self.initial_iterations,
            "conjecture_iterations": self.conjecture_iterations,
            "solver_width": self.solver_width,
            "tau": self.tau,
            "tau_e": self.tau_e,
            "verify_repeats": self.verify_repeats,
            "extraction_budget": self.extraction_budget,
            "parallel_runs": self.parallel_runs,
            "token_budget": self.token_budget,
            "max_output_tokens": self.max_output_tokens,
            "temperatures": dict(self.temperatures),
            "price_table": {k: dict(v) for k, v in self.price_table.items()},
            "retry_attempts": self.retry_attempts,
            "strict_budget": self.strict_budget,
            "memory_prompt_cap": self.memory_prompt_cap,
            "history_char_cap": self.history_char_cap,
            "grader_variant": self.grader_variant,
            "grader_variant_by_phase": {str(k): v for k, v in self.grader_variant_by_phase.items()},
            "solver_variant": self.solver_variant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "grader_variant_by_phase" in d:
            d["grader_variant_by_phase"] = {
                int(k): v for k, v in d["grader_variant_by_phase"].items()
            }
        return cls(**d)


@dataclass
class RunState:
    """Mutable state of one pipeline run.

    Lemma memory and failure context only ever grow; use the ``add_*``
    helpers rather than touching the lists, so monotonicity holds by
    construction.
    """

    run_id: str
    config: PipelineConfig
    solution_memory: list[CandidateSolution] = field(default_factory=list)
    lemma_memory: list[Lemma] = field(default_factory=list)
    failure_context: list[FailureRecord] = field(default_factory=list)
    phase1_iter: int = 0
    conjecture_iter: int = 0

    def add_solutions(self, solutions: Iterable[CandidateSolution]) -> None:
        self.solution_memory.extend(solutions)

    def add_lemmas(self, lemmas: Iterable[Lemma]) -> None:
        self.lemma_memory.extend(lemmas)

    def add_failures(self, failures: Iterable[FailureRecord]) -> None:
        self.failure_context.extend(failures)

    def bump_phase1(self) -> None:
        if self.phase1_iter >= self.config.initial_iterations:
            raise ValueError("phase-1 iteration counter exceeded its limit")
        self.phase1_iter += 1

    def bump_conjecture(self) -> None:
        if self.conjecture_iter >= self.config.conjecture_iterations:
            raise ValueError("conjecture iteration counter exceeded its limit")
        self.conjecture_iter += 1

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config.to_dict(),
            "solution_memory": [s.to_dict() for s in self.solution_memory],
            "lemma_memory": [l.to_dict() for l in self.lemma_memory],
            "failure_context": [f.to_dict() for f in self.failure_context],
            "phase1_iter": self.phase1_iter,
            "conjecture_iter": self.conjecture_iter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunState":
        return cls(
            run_id=d["run_id"],
            config=PipelineConfig.from_dict(d["config"]),
            solution_memory=[CandidateSolution.from_dict(s) for s in d["solution_memory"]],
            lemma_memory=[Lemma.from_dict(l) for l in d["lemma_memory"]],
            failure_context=[FailureRecord.from_dict(f) for f in d["failure_context"]],
            phase1_iter=d["phase1_iter"],
            conjecture_iter=d["conjecture_iter"],
        )


@dataclass(frozen=True)
class GradingRecord:
    """A (human grade, predicted grade) pair for grader evaluation."""

    human: int
    predicted: float
    problem_id: Optional[str] = None

    def __post_init__(self) -> None:
        if not (0 <= self.human <= 7):
            raise ValueError(f"human grade out of range: {self.human}")
        if not (0 <= self.predicted <= 7):
            raise ValueError(f"predicted grade out of range: {self.predicted}")

    def to_dict(self) -> dict:
        return {"human": self.human, "predicted": self.predicted, "problem_id": self.problem_id}

    @classmethod
    def from_dict(cls, d: dict) -> "GradingRecord":
        return cls(human=d["human"], predicted=d["predicted"], problem_id=d.get("problem_id"))


def comparator_key(solution: CandidateSolution) -> tuple:
    """Total-order key for ranking graded solutions.

    Higher score wins; ties break on fewer issues, then lower ledger cost
    at creation, then lexicographic id. The ordering is deterministic so
    any permutation of a set selects the same best element.
    """
    if solution.grade is None:
        raise ValueError(f"solution {solution.id} is ungraded")
    return (
        -solution.grade.score,
        len(solution.grade.issues),
        solution.cost_at_creation_micro,
        solution.id,
    )


def best(solutions: Iterable[CandidateSolution]) -> CandidateSolution:
    """Return the maximal graded solution under :func:`comparator_key`."""
    pool = list(solutions)
    if not pool:
        raise ValueError("no candidates")
    return min(pool, key=comparator_key)


def rank(solutions: Iterable[CandidateSolution]) -> list[CandidateSolution]:
    """All solutions, best first, deduplicated by proof text (best kept)."""
    ordered = sorted(solutions, key=comparator_key)
    seen: set[str] = set()
    out: list[CandidateSolution] = []
    for s in ordered:
        if s.proof_text in seen:
            continue
        seen.add(s.proof_text)
        out.append(s)
    return out
