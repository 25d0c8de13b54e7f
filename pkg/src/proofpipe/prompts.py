"""Prompt template registry.

Templates are data files, one per role, shipped under ``templates/`` with a
manifest that declares each role's required and optional slots. Slots use
the sentinel syntax ``{{slot:name}}``, chosen so no plausible math or LaTeX
text collides with it. Rendering is pure substitution: slot values are
inserted verbatim, nothing else in the body is rewritten.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional

SLOT_OPEN = "{{slot:"
SLOT_CLOSE = "}}"
EMPTY_MARKER = "(none provided)"

ROLE_IDS = (
    "solver",
    "solver_alt",
    "grader_council",
    "grader_simplified",
    "conjecture_extractor",
    "solution_parser",
    "answer_processor",
    "conjecture_parser",
    "answer_combiner",
)


class MissingSlot(KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name


class UnknownSlot(KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name


def _slot_token(name: str) -> str:
    return f"{SLOT_OPEN}{name}{SLOT_CLOSE}"


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    body: str
    required_slots: frozenset[str]
    optional_slots: frozenset[str]

    def __post_init__(self) -> None:
        # Required slots must sit in the body; optional ones may be dropped
        # by user overrides.
        for name in sorted(self.required_slots):
            if _slot_token(name) not in self.body:
                raise ValueError(f"template {self.id}: required slot {name!r} missing from body")

    def render(self, slots: Mapping[str, str]) -> str:
        """Substitute slot values into the body.

        Required slots must be present. Optional slots that are absent or
        blank render as the literal empty marker. Passing a slot the
        template does not declare is an error.
        """
        declared = self.required_slots | self.optional_slots
        for name in sorted(slots):
            if name not in declared:
                raise UnknownSlot(name)
        for name in sorted(self.required_slots):
            if name not in slots:
                raise MissingSlot(name)
        out = self.body
        for name in sorted(declared):
            if name in self.required_slots:
                value = slots[name]
            else:
                value = slots.get(name, "")
                if not value.strip():
                    value = EMPTY_MARKER
            out = out.replace(_slot_token(name), value)
        return out


class PromptRegistry:
    """Loads the shipped templates, with optional per-role file overrides."""

    def __init__(self, templates: dict[str, PromptTemplate]):
        self._templates = dict(templates)

    @classmethod
    def load(cls, overrides: Optional[dict[str, str | Path]] = None) -> "PromptRegistry":
        """Load shipped templates; ``overrides`` maps role id -> file path."""
        root = resources.files("proofpipe") / "templates"
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        templates: dict[str, PromptTemplate] = {}
        for role_id, entry in manifest.items():
            if overrides and role_id in overrides:
                body = Path(overrides[role_id]).read_text(encoding="utf-8")
            else:
                body = (root / entry["file"]).read_text(encoding="utf-8")
            templates[role_id] = PromptTemplate(
                id=role_id,
                body=body,
                required_slots=frozenset(entry["required"]),
                optional_slots=frozenset(entry.get("optional", [])),
            )
        return cls(templates)

    def get(self, role_id: str) -> PromptTemplate:
        if role_id not in self._templates:
            raise KeyError(f"no template registered for {role_id!r}")
        return self._templates[role_id]

    def render(self, role_id: str, slots: Mapping[str, str]) -> str:
        return self.get(role_id).render(slots)

    def version(self) -> str:
        """Digest over every template body; guards checkpoint compatibility."""
        h = hashlib.sha256()
        for role_id in sorted(self._templates):
            h.update(role_id.encode("utf-8"))
            h.update(self._templates[role_id].body.encode("utf-8"))
        return h.hexdigest()[:16]
