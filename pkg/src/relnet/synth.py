"""Deterministic generator of desk-scale relational micro-tasks.

Samples mirror the structure of the location-tracking bAbI tasks: a person
picks up an object and moves through locations while other entities
generate distractor events. The chain length k (1, 2 or 3 supporting
facts) controls how many facts the answer depends on:

* k=1  "Where is Mary?"                          -> her last move
* k=2  "Where is the milk?"                      -> take + holder's move
* k=3  "Where was the milk before the office?"   -> take + two moves

The micro vocabulary stays around 20 tokens so that very small models can
train in minutes. Generated samples use the same Sample type as the bAbI
pipeline; ``render_babi_text`` writes them back out in the official line
format.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from relnet.babi import Sample, tokenize


class UnanswerableError(ValueError):
    """The context does not determine the answer (a generator bug if raised
    on an untampered sample)."""


@dataclass
class SynthConfig:
    chain: int = 2                     # supporting facts per question, 1..3
    entities: tuple[str, ...] = ("mary", "john", "sandra", "daniel", "bill")
    objects: tuple[str, ...] = ("milk", "apple", "football")
    locations: tuple[str, ...] = ("kitchen", "hallway", "garden", "office")
    context_len: int = 8               # real sentences per sample, chain included
    seed: int = 0

    @property
    def chain_len(self) -> int:
        # number of chain statements: k=1 one move; k=2 take+move; k=3 take+2 moves
        return 1 if self.chain == 1 else self.chain

    def validate(self) -> None:
        if self.chain not in (1, 2, 3):
            raise ValueError(f"chain must be 1, 2 or 3, got {self.chain}")
        for name in ("entities", "objects", "locations"):
            if len(getattr(self, name)) < 2:
                raise ValueError(f"need at least 2 {name}")
        if not self.chain_len <= self.context_len <= 20:
            raise ValueError(
                f"context_len {self.context_len} cannot hold a {self.chain_len}-fact "
                "chain inside the 20-sentence window"
            )


def _move(person: str, loc: str) -> str:
    return f"{person.capitalize()} moved to the {loc}."

def _take(person: str, obj: str) -> str:
    return f"{person.capitalize()} took the {obj}."


def generate(config: SynthConfig, count: int) -> list[Sample]:
    """``count`` seeded samples; the answer is always the final location of
    the k-hop chain and ``supports`` are the exact chain statement indices."""
    config.validate()
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    rng = np.random.default_rng(config.seed)
    locations = list(config.locations)
    return [_one_sample(config, rng, locations) for _ in range(count)]


def _one_sample(config: SynthConfig, rng: np.random.Generator,
                locations: list[str]) -> Sample:
    person = str(rng.choice(config.entities))
    obj = str(rng.choice(config.objects))
    final = str(rng.choice(locations))

    if config.chain == 1:
        chain = [_move(person, final)]
        question, answer = f"Where is {person.capitalize()}?", final
    elif config.chain == 2:
        chain = [_take(person, obj), _move(person, final)]
        question, answer = f"Where is the {obj}?", final
    else:
        before = str(rng.choice([l for l in locations if l != final]))
        chain = [_take(person, obj), _move(person, before), _move(person, final)]
        question, answer = f"Where was the {obj} before the {final}?", before

    # distractors talk about other entities and other objects only
    others = [e for e in config.entities if e != person]
    free_objects = [o for o in config.objects if o != obj]
    distractors = []
    for _ in range(config.context_len - len(chain)):
        if free_objects and rng.random() < 0.3:
            idx = int(rng.integers(len(free_objects)))
            distractors.append(_take(str(rng.choice(others)), free_objects.pop(idx)))
        else:
            distractors.append(_move(str(rng.choice(others)), str(rng.choice(locations))))

    slots = sorted(rng.choice(config.context_len, size=len(chain), replace=False))
    context: list[str] = []
    chain_iter = iter(chain)
    distractor_iter = iter(distractors)
    supports = []
    for i in range(config.context_len):
        if slots and i == slots[0]:
            slots.pop(0)
            supports.append(i)
            context.append(next(chain_iter))
        else:
            context.append(next(distractor_iter))
    return Sample(task=config.chain, context=context, question=question,
                  answer=answer, supports=supports)


# ---------------------------------------------------------------------------
# symbolic oracle


def _replay(context: list[str]):
    """Person movement histories and object holders, by literal replay."""
    moves: dict[str, list[str]] = {}
    holder: dict[str, tuple[str, int]] = {}   # object -> (person, #moves holder had)
    for sentence in context:
        toks = tokenize(sentence)
        if len(toks) == 5 and toks[1:4] == ["moved", "to", "the"]:
            moves.setdefault(toks[0], []).append(toks[4])
        elif len(toks) == 4 and toks[1:3] == ["took", "the"]:
            holder[toks[3]] = (toks[0], len(moves.get(toks[0], [])))
        else:
            raise UnanswerableError(f"statement {sentence!r} matches no template")
    return moves, holder


def oracle_answer(sample: Sample) -> str:
    """Answer by symbolic chain-following; raises UnanswerableError when the
    context does not pin the answer down."""
    moves, holder = _replay([s for s in sample.context if s != "<pad>"])
    q = tokenize(sample.question)
    if len(q) == 3 and q[:2] == ["where", "is"]:
        trail = moves.get(q[2])
        if not trail:
            raise UnanswerableError(f"{q[2]} never moved")
        return trail[-1]
    if len(q) == 4 and q[:3] == ["where", "is", "the"]:
        obj = q[3]
        if obj not in holder:
            raise UnanswerableError(f"nobody took the {obj}")
        person, _ = holder[obj]
        trail = moves.get(person)
        if not trail:
            raise UnanswerableError(f"holder {person} never moved")
        return trail[-1]
    if len(q) == 7 and q[:3] == ["where", "was", "the"] and q[4:6] == ["before", "the"]:
        obj, pivot = q[3], q[6]
        if obj not in holder:
            raise UnanswerableError(f"nobody took the {obj}")
        person, taken_after = holder[obj]
        trail = moves.get(person, [])[taken_after:]   # object rides along from the take on
        if pivot not in trail:
            raise UnanswerableError(f"the {obj} was never in the {pivot}")
        at = len(trail) - 1 - trail[::-1].index(pivot)
        if at == 0:
            raise UnanswerableError(f"no location known before the {pivot}")
        return trail[at - 1]
    raise UnanswerableError(f"question {sample.question!r} matches no template")


# ---------------------------------------------------------------------------
# rendering back to corpus text


def render_babi_text(samples: list[Sample]) -> str:
    """Official line format, one story per sample (line numbers restart at 1)."""
    lines = []
    for s in samples:
        for i, sentence in enumerate(s.context, start=1):
            lines.append(f"{i} {sentence}")
        facts = " ".join(str(i + 1) for i in s.supports)
        lines.append(f"{len(s.context) + 1} {s.question}\t{s.answer}\t{facts}".rstrip("\t"))
    return "\n".join(lines) + ("\n" if lines else "")


def write_corpus_dir(out_dir, per_task: dict[int, dict[str, list[Sample]]]) -> list:
    """Write qa<task>_<split>.txt files in the official layout; returns paths."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for task in sorted(per_task):
        for split, samples in per_task[task].items():
            path = out / f"qa{task}_{split}.txt"
            path.write_text(render_babi_text(samples))
            paths.append(path)
    return paths
