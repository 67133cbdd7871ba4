"""Prompt construction for both stages and both judging strategies.

Template bodies live as UTF-8 text files with {name} placeholders and are
resolved through a registry keyed by (stage, kind, strategy), so the exact
wording sent to models can be audited or swapped without touching code.  The
self-reference strategy reuses the pointwise judgment wording but inserts the
judge's own earlier answer as a reference block.

Rendering is pure string substitution: same template and bindings, same
bytes.  The whole rendered text is delivered to providers as a single user
message.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable

from .corpus import Item, TaskKind, item_kind

ALLOWED_PLACEHOLDERS = frozenset(
    {
        "question",
        "options",
        "category",
        "answer_a",
        "ref_answer",
        "response",
        "response_a",
        "response_b",
    }
)

# Used when a multiple-choice item does not carry a subject tag.
DEFAULT_CATEGORY = "miscellaneous topics"


class Stage(str, Enum):
    GENERATION = "generation"
    JUDGMENT = "judgment"


class Strategy(str, Enum):
    COT = "cot"
    SELF_REFERENCE = "self-ref"


class PromptError(Exception):
    pass


class MissingTemplate(PromptError):
    def __init__(self, stage: Stage, kind: TaskKind, strategy: "Strategy | None" = None):
        suffix = f", strategy {strategy.value!r}" if strategy else ""
        super().__init__(f"no template for stage {stage.value!r}, kind {kind.value!r}{suffix}")
        self.stage = stage
        self.kind = kind
        self.strategy = strategy


class MissingBinding(PromptError):
    def __init__(self, name: str):
        super().__init__(f"template placeholder {{{name}}} has no binding")
        self.name = name


class MissingReference(PromptError):
    def __init__(self, item_id: str):
        super().__init__(
            f"self-reference judging needs the judge's own answer for item {item_id!r}"
        )
        self.item_id = item_id


class RegistryError(PromptError):
    pass


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _placeholders(body: str) -> set[str]:
    names = set()
    for _, name, _, _ in string.Formatter().parse(body):
        if name:
            names.add(name)
    return names


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    stage: Stage
    kind: TaskKind
    strategy: Strategy | None
    body: str

    @property
    def sha256(self) -> str:
        return _sha256_text(self.body)

    def placeholders(self) -> set[str]:
        return _placeholders(self.body)


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    template_id: str
    bindings_digest: str


class TemplateRegistry:
    """Lookup table from (stage, kind, strategy) to a validated template."""

    def __init__(self, templates: Iterable[PromptTemplate]):
        self._by_key: dict[tuple, PromptTemplate] = {}
        self._templates: list[PromptTemplate] = []
        for template in templates:
            extra = template.placeholders() - ALLOWED_PLACEHOLDERS
            if extra:
                raise RegistryError(
                    f"template {template.template_id!r} uses unknown placeholders {sorted(extra)}"
                )
            key = (template.stage, template.kind, template.strategy)
            if key in self._by_key:
                raise RegistryError(f"duplicate template for {key}")
            self._by_key[key] = template
            self._templates.append(template)

    @classmethod
    def builtin(cls) -> "TemplateRegistry":
        """The packaged template set."""
        root = resources.files("genjudge") / "templates"
        manifest = json.loads((root / "registry.json").read_text(encoding="utf-8"))
        return cls(_templates_from_manifest(manifest, root))

    @classmethod
    def from_dir(cls, path: str | Path) -> "TemplateRegistry":
        """Load a user-supplied template directory.

        The directory must hold a registry.json manifest; entries may pin a
        sha256, which is verified against the file on disk.
        """
        root = Path(path)
        manifest_path = root / "registry.json"
        if not manifest_path.exists():
            raise RegistryError(f"no registry.json in {root}")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        return cls(_templates_from_manifest(manifest, root, verify=True))

    def lookup(
        self, stage: Stage, kind: TaskKind, strategy: Strategy | None = None
    ) -> PromptTemplate:
        template = self._by_key.get((stage, kind, strategy))
        if template is None:
            raise MissingTemplate(stage, kind, strategy)
        return template

    def manifest(self) -> list[dict]:
        """Registry listing with content digests, for run manifests."""
        rows = []
        for template in self._templates:
            rows.append(
                {
                    "template_id": template.template_id,
                    "stage": template.stage.value,
                    "kind": template.kind.value,
                    "strategy": template.strategy.value if template.strategy else None,
                    "sha256": template.sha256,
                }
            )
        return rows

    def digests(self) -> dict[str, str]:
        return {t.template_id: t.sha256 for t in self._templates}


def _templates_from_manifest(manifest: list[dict], root, verify: bool = False) -> list[PromptTemplate]:
    templates = []
    for entry in manifest:
        body = (root / entry["path"]).read_text(encoding="utf-8")
        if verify and entry.get("sha256"):
            actual = _sha256_text(body)
            if actual != entry["sha256"]:
                raise RegistryError(
                    f"digest mismatch for {entry['path']}: manifest {entry['sha256'][:12]}, "
                    f"file {actual[:12]}"
                )
        templates.append(
            PromptTemplate(
                template_id=entry["template_id"],
                stage=Stage(entry["stage"]),
                kind=TaskKind(entry["kind"]),
                strategy=Strategy(entry["strategy"]) if entry.get("strategy") else None,
                body=body,
            )
        )
    return templates


_default_registry: TemplateRegistry | None = None


def default_registry() -> TemplateRegistry:
    global _default_registry
    if _default_registry is None:
        _default_registry = TemplateRegistry.builtin()
    return _default_registry


def format_option_lines(options: tuple[str, ...]) -> str:
    """Lettered option block: "A. first\nB. second" and so on."""
    return "\n".join(f"{chr(ord('A') + i)}. {text}" for i, text in enumerate(options))


def _render(template: PromptTemplate, bindings: dict[str, str]) -> RenderedPrompt:
    needed = template.placeholders()
    for name in sorted(needed):
        if name not in bindings:
            raise MissingBinding(name)
    used = {name: bindings[name] for name in needed}
    text = template.body.format(**used)
    digest = _sha256_text(
        template.template_id + "\x00" + json.dumps(used, sort_keys=True, ensure_ascii=False)
    )
    return RenderedPrompt(text=text, template_id=template.template_id, bindings_digest=digest)


def render_generation_prompt(
    item: Item, registry: TemplateRegistry | None = None
) -> RenderedPrompt:
    """Stage-one prompt asking a model to answer the item itself.

    For pairwise items that "answer" is a comparative verdict over the two
    bundled responses, so the rendered prompt is itself a judging instruction.
    """
    registry = registry or default_registry()
    kind = item_kind(item)
    template = registry.lookup(Stage.GENERATION, kind)
    bindings = {"question": item.question}
    if kind is TaskKind.MULTIPLE_CHOICE:
        bindings["options"] = format_option_lines(item.options)
        bindings["category"] = str(item.meta.get("category", DEFAULT_CATEGORY))
    elif kind is TaskKind.PAIRWISE_VERDICT:
        bindings["response_a"] = item.response_a
        bindings["response_b"] = item.response_b
    return _render(template, bindings)


def render_judgment_prompt(
    item: Item,
    agent_output: str,
    strategy: Strategy,
    reference: str | None = None,
    registry: TemplateRegistry | None = None,
) -> RenderedPrompt:
    """Stage-two prompt asking the judge for a binary verdict on one answer.

    Exactly one agent output appears per prompt.  Under the self-reference
    strategy the judge's own full stage-one output (reasoning included) is
    embedded as the reference; it is required and must be non-empty.  Under
    plain chain-of-thought any provided reference is ignored.
    """
    registry = registry or default_registry()
    kind = item_kind(item)
    if strategy is Strategy.SELF_REFERENCE and not reference:
        raise MissingReference(item.item_id)
    template = registry.lookup(Stage.JUDGMENT, kind, strategy)
    bindings = {"question": item.question}
    if kind is TaskKind.PAIRWISE_VERDICT:
        bindings["response"] = agent_output
    else:
        bindings["answer_a"] = agent_output
    if strategy is Strategy.SELF_REFERENCE:
        bindings["ref_answer"] = reference or ""
    return _render(template, bindings)
