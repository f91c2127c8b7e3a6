"""Cascaded few-shot instruction generation.

Iteration 1 turns the M human seed instructions into M generated
instructions per attribute (over M sampled categories). Every later
iteration regenerates an instruction for each target (category, attribute)
pair from same-attribute instructions of the previous iteration.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from apcascade.catalog import Catalog, ProductCategory, StructuredAttribute
from apcascade.errors import ArgumentError, ConfigError, GenerationError, IntegrityError, MissingSAError
from apcascade.gateway import DEFAULT_MAX_TOKENS, Gateway, LlmRequest
from apcascade.templates import FewShot, render_instruction_prompt

log = logging.getLogger(__name__)

Pair = tuple[str, str]
FewshotKey = tuple[str, str, int]

GENERATION_REMINDER = "\n\nAnswer strictly in the output format: a single line starting with 'instruction:'."
_INSTRUCTION_RE = re.compile(r"^\s*\**instruction\**\s*:\s*(.*)", re.I | re.M | re.S)


@dataclass(frozen=True)
class Lineage:
    fewshots: tuple[FewshotKey, ...]
    model_id: str
    rng_seed: int


@dataclass(frozen=True)
class Instruction:
    pc_id: str
    sa_id: str
    text: str
    iteration: int = 0
    lineage: Lineage | None = None
    created_at: str = ""

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ArgumentError(f"instruction for ({self.pc_id}, {self.sa_id}) has empty text")
        if self.iteration < 0:
            raise ArgumentError("iteration must be >= 0")
        if (self.iteration == 0) != (self.lineage is None):
            raise ArgumentError("iteration 0 is reserved for human seeds, which carry no lineage")

    @property
    def key(self) -> Pair:
        return self.pc_id, self.sa_id

    def to_dict(self) -> dict:
        lineage = None
        if self.lineage is not None:
            lineage = {
                "fewshots": [list(k) for k in self.lineage.fewshots],
                "model_id": self.lineage.model_id,
                "rng_seed": self.lineage.rng_seed,
            }
        return {
            "pc_id": self.pc_id,
            "sa_id": self.sa_id,
            "iteration": self.iteration,
            "text": self.text,
            "lineage": lineage,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Instruction":
        lin = d.get("lineage")
        lineage = None
        if lin:
            lineage = Lineage(
                fewshots=tuple((str(a), str(b), int(c)) for a, b, c in lin["fewshots"]),
                model_id=lin["model_id"],
                rng_seed=int(lin["rng_seed"]),
            )
        return cls(
            pc_id=d["pc_id"],
            sa_id=d["sa_id"],
            text=d["text"],
            iteration=int(d.get("iteration", 0)),
            lineage=lineage,
            created_at=d.get("created_at", ""),
        )


@dataclass
class SeedSet:
    """The M human-authored instructions that start the cascade."""

    instructions: tuple[Instruction, ...]
    definitions: dict[Pair, tuple[str, str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.instructions = tuple(self.instructions)
        if not self.instructions:
            raise ArgumentError("seed set is empty")
        if any(i.iteration != 0 for i in self.instructions):
            raise ArgumentError("seed instructions must be at iteration 0")
        pairs = [i.key for i in self.instructions]
        if len(set(pairs)) != len(pairs):
            raise ArgumentError("seed instructions must cover distinct (pc, sa) pairs")
        sas = [i.sa_id for i in self.instructions]
        if len(set(sas)) != len(sas):
            raise ArgumentError("seed instructions must cover distinct attributes")

    def __len__(self) -> int:
        return len(self.instructions)

    def take(self, m: int) -> "SeedSet":
        if m > len(self):
            raise ArgumentError(f"need {m} seed instructions, only {len(self)} available")
        chosen = self.instructions[:m]
        return SeedSet(chosen, {k: v for k, v in self.definitions.items() if k in {i.key for i in chosen}})


def load_seeds(path: str | Path, m: int | None = None) -> SeedSet:
    """Seed file: JSONL with pc_id, sa_id, text and optional pc_definition / sa_definition."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"seed file not found: {path}")
    instructions, defs = [], {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                instr = Instruction(pc_id=rec["pc_id"], sa_id=rec["sa_id"], text=rec["text"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad seed record ({exc})") from exc
            instructions.append(instr)
            if rec.get("pc_definition") or rec.get("sa_definition"):
                defs[instr.key] = (rec.get("pc_definition", ""), rec.get("sa_definition", ""))
    seeds = SeedSet(tuple(instructions), defs)
    return seeds.take(m) if m is not None else seeds


@dataclass(frozen=True)
class CascadeConfig:
    T: int = 2
    M: int = 6
    rng_seed: int = 0
    model_id: str = "generator"
    temperature: float = 0.3
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ArgumentError("T must be >= 1")
        if self.M < 1:
            raise ArgumentError("M must be >= 1")

    def fingerprint(self) -> str:
        # T only matters through the shape of iteration 1 (seed fan-out vs. direct targets)
        raw = json.dumps([self.M, self.rng_seed, self.model_id, self.temperature, self.max_tokens, self.T == 1])
        return hashlib.sha256(raw.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Failure:
    pc_id: str
    sa_id: str
    iteration: int
    reason: str


@dataclass
class InstructionSet:
    instructions: dict[Pair, Instruction] = field(default_factory=dict)
    snapshots: dict[int, dict[Pair, Instruction]] = field(default_factory=dict)
    failures: list[Failure] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.instructions)

    def get(self, pc_id: str, sa_id: str) -> Instruction | None:
        return self.instructions.get((pc_id, sa_id))

    def keys(self) -> list[Pair]:
        return sorted(self.instructions)


def iteration_rng(seed: int, iteration: int) -> random.Random:
    # one generator per iteration keeps resumed runs identical to uninterrupted ones
    return random.Random(f"{seed}/{iteration}")


def sample_pcs(catalog: Catalog, m: int, rng: random.Random) -> list[str]:
    pcs = sorted(catalog.pcs)
    if len(pcs) < m:
        raise ArgumentError(f"cannot sample {m} product categories from {len(pcs)}")
    return rng.sample(pcs, m)


def select_fewshot(
    prev: Mapping[Pair, Instruction], sa_id: str, m: int, rng: random.Random
) -> list[Instruction]:
    """Up to ``m`` same-attribute instructions from the previous iteration."""
    candidates = [prev[k] for k in sorted(prev) if k[1] == sa_id]
    if not candidates:
        raise MissingSAError(f"no previous-iteration instruction for attribute {sa_id!r}")
    if len(candidates) <= m:
        return candidates
    chosen = set(rng.sample(range(len(candidates)), m))
    return [c for n, c in enumerate(candidates) if n in chosen]


def parse_instruction(raw: str) -> str:
    m = _INSTRUCTION_RE.search(raw)
    if not m:
        raise GenerationError("response has no 'instruction:' field")
    text = m.group(1).strip().strip('"').strip()
    if not text:
        raise GenerationError("response has an empty instruction")
    return text


class _Definitions:
    def __init__(self, catalog: Catalog, seeds: SeedSet | None = None):
        self.catalog = catalog
        self.seed_defs = dict(seeds.definitions) if seeds else {}

    def pair(self, pc_id: str, sa_id: str) -> tuple[str, str]:
        pc_def, sa_def = self.seed_defs.get((pc_id, sa_id), ("", ""))
        if not pc_def and pc_id in self.catalog.pcs:
            pc_def = self.catalog.pcs[pc_id].definition
        if not sa_def and sa_id in self.catalog.sas:
            sa_def = self.catalog.sas[sa_id].definition
        return pc_def, sa_def

    def fewshot(self, instr: Instruction) -> FewShot:
        pc_def, sa_def = self.pair(instr.pc_id, instr.sa_id)
        if not pc_def or not sa_def:
            raise ArgumentError(f"no definitions available for few-shot ({instr.pc_id}, {instr.sa_id})")
        return FewShot(pc_def, sa_def, instr.text)


def generate_instruction(
    pc: ProductCategory,
    sa: StructuredAttribute,
    fewshots: Sequence[Instruction],
    gateway: Gateway,
    *,
    config: CascadeConfig | None = None,
    catalog: Catalog | None = None,
    seeds: SeedSet | None = None,
) -> Instruction:
    """One generation call (with a single format-reminder retry)."""
    config = config or CascadeConfig()
    if not fewshots:
        raise ArgumentError("fewshots must be non-empty")
    defs = _Definitions(catalog or Catalog.build(pcs=[pc], sas=[sa]), seeds)
    return _generate(pc, sa, fewshots, [defs.fewshot(f) for f in fewshots], config, gateway)


class InstructionStore:
    """Append-only JSONL of instructions plus one manifest per completed iteration."""

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.records_path = self.dir / "instructions.jsonl"

    def manifest_path(self, iteration: int) -> Path:
        return self.dir / f"iteration-{iteration}.manifest.json"

    def append(self, instr: Instruction) -> None:
        with self.records_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(instr.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")

    def records(self) -> list[Instruction]:
        if not self.records_path.exists():
            return []
        with self.records_path.open(encoding="utf-8") as fh:
            return [Instruction.from_dict(json.loads(line)) for line in fh if line.strip()]

    def write_manifest(self, iteration: int, snapshot: Mapping[Pair, Instruction], failures: list[Failure], fingerprint: str) -> None:
        manifest = {
            "iteration": iteration,
            "complete": True,
            "config": fingerprint,
            "count": len(snapshot),
            "keys": [list(k) for k in sorted(snapshot)],
            "failures": [[f.pc_id, f.sa_id, f.reason] for f in failures if f.iteration == iteration],
        }
        self.manifest_path(iteration).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")

    def read_manifest(self, iteration: int) -> dict | None:
        path = self.manifest_path(iteration)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def load_final(self) -> InstructionSet:
        """Latest completed iteration as an InstructionSet (used by classification)."""
        iteration = 0
        while self.read_manifest(iteration + 1) is not None:
            iteration += 1
        if iteration == 0:
            raise ConfigError(f"no completed iteration in {self.dir}")
        manifest = self.read_manifest(iteration)
        wanted = {tuple(k) for k in manifest["keys"]}
        snapshot: dict[Pair, Instruction] = {}
        for instr in self.records():
            if instr.iteration == iteration and instr.key in wanted:
                snapshot[instr.key] = instr
        failures = [Failure(pc, sa, iteration, reason) for pc, sa, reason in manifest["failures"]]
        return InstructionSet(dict(snapshot), {iteration: dict(snapshot)}, failures)


def run_cascade(
    catalog: Catalog,
    seeds: SeedSet,
    config: CascadeConfig,
    targets: Iterable[Pair],
    gateway: Gateway,
    *,
    store: InstructionStore | None = None,
) -> InstructionSet:
    targets = sorted(set(targets))
    for pc_id, sa_id in targets:
        if pc_id not in catalog.pcs or sa_id not in catalog.sas:
            raise IntegrityError(f"target ({pc_id}, {sa_id}) is not in the catalog", ids=(pc_id, sa_id))
        if not catalog.pcs[pc_id].definition.strip() or not catalog.sas[sa_id].definition.strip():
            raise ArgumentError(f"target ({pc_id}, {sa_id}) lacks a definition")
    if len(seeds) != config.M:
        seeds = seeds.take(config.M)
    defs = _Definitions(catalog, seeds)
    result = InstructionSet()
    existing = _existing_records(store, config)
    fingerprint = config.fingerprint()

    def plan_first() -> list[tuple[Pair, list[Instruction]]]:
        fewshots = list(seeds.instructions)
        if config.T == 1:
            return [(pair, fewshots) for pair in targets]
        rng = iteration_rng(config.rng_seed, 1)
        plan = []
        for sa_id in sorted({sa for _, sa in targets}):
            for pc_id in sample_pcs(catalog, config.M, rng):
                plan.append(((pc_id, sa_id), fewshots))
        return plan

    def plan_next(iteration: int, prev: Mapping[Pair, Instruction]) -> list[tuple[Pair, list[Instruction] | None]]:
        rng = iteration_rng(config.rng_seed, iteration)
        plan: list[tuple[Pair, list[Instruction] | None]] = []
        for pair in targets:
            try:
                plan.append((pair, select_fewshot(prev, pair[1], config.M, rng)))
            except MissingSAError:
                plan.append((pair, None))
        return plan

    prev: dict[Pair, Instruction] = {}
    for iteration in range(1, config.T + 1):
        resumed = _resume_snapshot(store, iteration, fingerprint, existing)
        plan = plan_first() if iteration == 1 else plan_next(iteration, prev)
        if resumed is not None:
            snapshot, failures = resumed
            log.info("iteration %d resumed from store (%d instructions)", iteration, len(snapshot))
        else:
            snapshot, failures = _run_iteration(iteration, plan, catalog, defs, config, gateway, store, existing)
            if store is not None:
                store.write_manifest(iteration, snapshot, failures, fingerprint)
        result.snapshots[iteration] = snapshot
        result.failures.extend(failures)
        prev = snapshot
        log.info("iteration %d: %d instructions, %d failures", iteration, len(snapshot), len(failures))

    result.instructions = dict(prev)
    return result


def _existing_records(store: InstructionStore | None, config: CascadeConfig) -> dict[tuple[Pair, int], Instruction]:
    if store is None:
        return {}
    manifest = store.read_manifest(1)
    if manifest is not None and manifest.get("config") != config.fingerprint():
        raise ConfigError(f"{store.dir} holds a run with a different cascade configuration")
    return {(i.key, i.iteration): i for i in store.records() if i.iteration > 0}


def _resume_snapshot(
    store: InstructionStore | None,
    iteration: int,
    fingerprint: str,
    existing: Mapping[tuple[Pair, int], Instruction],
) -> tuple[dict[Pair, Instruction], list[Failure]] | None:
    if store is None:
        return None
    manifest = store.read_manifest(iteration)
    if manifest is None or not manifest.get("complete") or manifest.get("config") != fingerprint:
        return None
    snapshot = {}
    for pc_id, sa_id in manifest["keys"]:
        instr = existing.get(((pc_id, sa_id), iteration))
        if instr is None:
            return None
        snapshot[(pc_id, sa_id)] = instr
    failures = [Failure(pc, sa, iteration, reason) for pc, sa, reason in manifest["failures"]]
    return snapshot, failures


def _run_iteration(
    iteration: int,
    plan: Sequence[tuple[Pair, list[Instruction] | None]],
    catalog: Catalog,
    defs: _Definitions,
    config: CascadeConfig,
    gateway: Gateway,
    store: InstructionStore | None,
    existing: Mapping[tuple[Pair, int], Instruction],
) -> tuple[dict[Pair, Instruction], list[Failure]]:
    snapshot: dict[Pair, Instruction] = {}
    failures: list[Failure] = []

    def work(pair: Pair, fewshots: list[Instruction] | None) -> Instruction | Failure:
        if fewshots is None:
            return Failure(*pair, iteration, "MissingSA: no previous-iteration instruction for this attribute")
        prior = existing.get((pair, iteration))
        wanted = tuple((f.pc_id, f.sa_id, f.iteration) for f in fewshots)
        if prior is not None and prior.lineage is not None and prior.lineage.fewshots == wanted:
            return prior
        try:
            shots = [defs.fewshot(f) for f in fewshots]
            pc, sa = catalog.pcs[pair[0]], catalog.sas[pair[1]]
            return _generate(pc, sa, fewshots, shots, config, gateway)
        except (GenerationError, ArgumentError) as exc:
            return Failure(*pair, iteration, f"{type(exc).__name__}: {exc}")

    with ThreadPoolExecutor(max_workers=gateway.max_in_flight) as pool:
        futures = [pool.submit(work, pair, fewshots) for pair, fewshots in plan]
        # consume in plan order so the store is byte-stable regardless of completion order
        for (pair, _), future in zip(plan, futures):
            outcome = future.result()
            if isinstance(outcome, Failure):
                failures.append(outcome)
                continue
            if store is not None and existing.get((pair, iteration)) is not outcome:
                store.append(outcome)
            snapshot[pair] = outcome
    return snapshot, failures


def _generate(
    pc: ProductCategory,
    sa: StructuredAttribute,
    fewshots: Sequence[Instruction],
    shots: Sequence[FewShot],
    config: CascadeConfig,
    gateway: Gateway,
) -> Instruction:
    prompt = render_instruction_prompt(pc.definition, sa.definition, shots).text
    last: GenerationError | None = None
    for attempt in range(2):
        request = LlmRequest(
            prompt=prompt + (GENERATION_REMINDER if attempt else ""),
            model_id=config.model_id,
            temperature=config.temperature,
            max_tokens=config.max_tokens,
            purpose="instruction_gen",
        )
        response = gateway.complete(request)
        try:
            text = parse_instruction(response.text)
        except GenerationError as exc:
            last = exc
            continue
        return Instruction(
            pc_id=pc.id,
            sa_id=sa.id,
            text=text,
            iteration=1 + max(f.iteration for f in fewshots),
            lineage=Lineage(
                fewshots=tuple((f.pc_id, f.sa_id, f.iteration) for f in fewshots),
                model_id=config.model_id,
                rng_seed=config.rng_seed,
            ),
            created_at=response.created_at,
        )
    raise GenerationError(f"unparseable generation output for ({pc.id}, {sa.id}): {last}", (pc.id, sa.id))
