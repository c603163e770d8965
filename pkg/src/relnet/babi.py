"""bAbI 20 QA text pipeline.

Parses the official line format, extracts one sample per question, fixes
every context to exactly 20 sentences (keep the most recent statements,
pad short contexts at the end), builds deterministic vocabularies, encodes
samples to token ids, and analyzes the answer ambiguity of task 16.

File format expected (the published en-valid-10k corpus): statements as
``<n> <sentence>.``, questions as ``<n> <question>?<TAB><answer>[<TAB><fact
numbers>]``, with a line-number reset to 1 delimiting stories. Per task
and split there is one file, ``qa<T>_train.txt`` / ``_valid.txt`` /
``_test.txt`` (a task-name infix as in ``qa2_two-supporting-facts_train.txt``
is accepted too).
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_SENTENCE = PAD_TOKEN
CONTEXT_SIZE = 20


class ParseError(ValueError):
    """Malformed corpus text; message carries file name and line number."""


class Task16GrammarError(ValueError):
    """A sample does not follow the species/color fact structure of task 16."""


@dataclass
class Question:
    line_no: int
    text: str
    answer: str
    supports: list[int] = field(default_factory=list)  # statement line numbers


@dataclass
class RawStory:
    statements: list[tuple[int, str]] = field(default_factory=list)
    questions: list[Question] = field(default_factory=list)


@dataclass
class Sample:
    """One question with everything needed to answer it."""

    task: int
    context: list[str]          # statements before the question, questions excluded
    question: str
    answer: str                 # full answer string, one class
    supports: list[int] = field(default_factory=list)  # indices into context


@dataclass
class EncodedSample:
    task: int
    sentences: list[list[int]]
    question: list[int]
    label: int
    supports: list[int] = field(default_factory=list)


def tokenize(text: str) -> list[str]:
    """Lowercase, strip sentence-final punctuation, split on whitespace."""
    t = text.lower().strip()
    while t and t[-1] in ".?!":
        t = t[:-1].rstrip()
    return t.split()


# ---------------------------------------------------------------------------
# parsing


def parse_babi_file(text, name: str = "<string>") -> list[RawStory]:
    """Parse one corpus file (a string or an iterable of lines) into stories."""
    if isinstance(text, str):
        lines = text.splitlines()
    else:
        lines = [ln.rstrip("\n") for ln in text]
    stories: list[RawStory] = []
    story: RawStory | None = None
    prev_no = 0

    for file_line, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        m = re.match(r"(\d+)[ \t](.*)$", raw)
        if m is None:
            raise ParseError(f"{name}:{file_line}: expected '<number> <text>', got {raw!r}")
        line_no, rest = int(m.group(1)), m.group(2)
        if line_no == 1:
            if story is not None:
                stories.append(story)
            story = RawStory()
        elif story is None or line_no <= prev_no:
            raise ParseError(
                f"{name}:{file_line}: line number {line_no} not increasing (previous {prev_no})"
            )
        prev_no = line_no

        if "\t" in rest:
            parts = rest.split("\t")
            if len(parts) < 2 or not parts[0].strip():
                raise ParseError(f"{name}:{file_line}: malformed question line {raw!r}")
            supports = []
            if len(parts) >= 3 and parts[2].strip():
                try:
                    supports = [int(tok) for tok in parts[2].split()]
                except ValueError:
                    raise ParseError(
                        f"{name}:{file_line}: supporting facts must be line numbers, got {parts[2]!r}"
                    ) from None
            known = {no for no, _ in story.statements}
            for s in supports:
                if s not in known:
                    raise ParseError(
                        f"{name}:{file_line}: supporting fact {s} does not point at an earlier statement"
                    )
            story.questions.append(
                Question(line_no, parts[0].strip(), parts[1].strip(), supports))
        else:
            stmt = rest.strip()
            if not stmt:
                raise ParseError(f"{name}:{file_line}: empty statement")
            story.statements.append((line_no, stmt))

    if story is not None:
        stories.append(story)
    return stories


def serialize_stories(stories: list[RawStory]) -> str:
    """Inverse of parse_babi_file up to whitespace normalization."""
    out = []
    for story in stories:
        merged = [(no, "stmt", text) for no, text in story.statements]
        merged += [(q.line_no, "q", q) for q in story.questions]
        for no, kind, payload in sorted(merged, key=lambda e: e[0]):
            if kind == "stmt":
                out.append(f"{no} {payload}")
            else:
                fact_str = " ".join(str(s) for s in payload.supports)
                out.append(f"{no} {payload.text}\t{payload.answer}\t{fact_str}".rstrip("\t"))
    return "\n".join(out) + ("\n" if out else "")


def extract_samples(stories: list[RawStory], task: int) -> list[Sample]:
    """One Sample per question; its context is every statement seen so far."""
    samples = []
    for story in stories:
        for q in story.questions:
            context = [(no, text) for no, text in story.statements if no < q.line_no]
            index_of = {no: i for i, (no, _) in enumerate(context)}
            samples.append(Sample(
                task=task,
                context=[text for _, text in context],
                question=q.text,
                answer=q.answer,
                supports=[index_of[s] for s in q.supports],
            ))
    return samples


def preprocess_context(sample: Sample, size: int = CONTEXT_SIZE) -> Sample:
    """Fix the context to exactly ``size`` sentences.

    Longer contexts keep the most recent ``size`` statements (supporting
    fact indices are remapped; facts truncated away are dropped). Shorter
    contexts get padding sentences appended at the end.
    """
    if not sample.context:
        raise ValueError("sample has an empty context")
    context = list(sample.context)
    supports = list(sample.supports)
    if len(context) > size:
        drop = len(context) - size
        context = context[drop:]
        supports = [s - drop for s in supports if s - drop >= 0]
    elif len(context) < size:
        context = context + [PAD_SENTENCE] * (size - len(context))
    return replace(sample, context=context, supports=supports)


# ---------------------------------------------------------------------------
# vocabulary and encoding


@dataclass
class Vocabulary:
    """Word ids (PAD=0, UNK=1, then sorted tokens) and answer class ids.

    Answer classes are full answer strings; multi-word answers such as
    ``apple,milk`` stay one class.
    """

    id_to_word: list[str]
    id_to_answer: list[str]

    def __post_init__(self):
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}
        self.answer_to_id = {a: i for i, a in enumerate(self.id_to_answer)}

    @property
    def size(self) -> int:
        return len(self.id_to_word)

    @property
    def n_answers(self) -> int:
        return len(self.id_to_answer)

    def word_id(self, token: str) -> int:
        return self.word_to_id.get(token, self.word_to_id[UNK_TOKEN])

    def answer_id(self, answer: str) -> int:
        if answer not in self.answer_to_id:
            raise ValueError(f"answer {answer!r} not in the answer vocabulary")
        return self.answer_to_id[answer]

    def content_hash(self) -> str:
        payload = json.dumps([self.id_to_word, self.id_to_answer]).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def build_vocab(samples: list[Sample]) -> Vocabulary:
    """Deterministic vocabulary over the given (training+validation) samples."""
    words: set[str] = set()
    answers: set[str] = set()
    for s in samples:
        for sentence in s.context:
            if sentence != PAD_SENTENCE:
                words.update(tokenize(sentence))
        words.update(tokenize(s.question))
        answers.add(s.answer)
    words.discard(PAD_TOKEN)
    words.discard(UNK_TOKEN)
    return Vocabulary(id_to_word=[PAD_TOKEN, UNK_TOKEN] + sorted(words),
                      id_to_answer=sorted(answers))


def encode_sample(sample: Sample, vocab: Vocabulary) -> EncodedSample:
    """Token-id form of a preprocessed sample. Out-of-vocabulary words map
    to the reserved UNK id; an unknown answer is rejected."""
    sentences = []
    for sentence in sample.context:
        if sentence == PAD_SENTENCE:
            sentences.append([vocab.word_to_id[PAD_TOKEN]])
        else:
            sentences.append([vocab.word_id(t) for t in tokenize(sentence)])
    return EncodedSample(
        task=sample.task,
        sentences=sentences,
        question=[vocab.word_id(t) for t in tokenize(sample.question)],
        label=vocab.answer_id(sample.answer),
        supports=list(sample.supports),
    )


def decode_tokens(ids: list[int], vocab: Vocabulary) -> list[str]:
    return [vocab.id_to_word[i] for i in ids]


# ---------------------------------------------------------------------------
# task 16 ambiguity


@dataclass
class Task16Analysis:
    entity: str
    species: str
    color_support: dict[str, int]        # same-species color fact counts
    label: str
    ambiguous_by_count: bool             # majority tie, or label not a majority color
    multi_support: bool                  # more than one color has any support

    @property
    def ambiguous_either(self) -> bool:
        return self.ambiguous_by_count or self.multi_support


def detect_task16_ambiguity(sample: Sample) -> Task16Analysis:
    """Classify a task-16 sample by its color evidence.

    Resolves the queried entity's species, counts color facts among other
    entities of that species, and reports two signals: whether the label
    fails to be the unique majority color (``ambiguous_by_count``) and
    whether several colors have any support at all (``multi_support``).
    """
    species: dict[str, str] = {}
    colors: list[tuple[str, str]] = []
    for sentence in sample.context:
        if sentence == PAD_SENTENCE:
            continue
        toks = tokenize(sentence)
        if len(toks) == 4 and toks[1] == "is" and toks[2] in ("a", "an"):
            species[toks[0]] = toks[3]
        elif len(toks) == 3 and toks[1] == "is":
            colors.append((toks[0], toks[2]))
        else:
            raise Task16GrammarError(f"statement {sentence!r} matches no task-16 pattern")
    q_toks = tokenize(sample.question)
    if len(q_toks) != 4 or q_toks[:3] != ["what", "color", "is"]:
        raise Task16GrammarError(f"question {sample.question!r} is not a color query")
    entity = q_toks[3]
    if entity not in species:
        raise Task16GrammarError(f"queried entity {entity!r} has no species fact")
    target = species[entity]
    support = Counter(color for name, color in colors
                      if name != entity and species.get(name) == target)
    if not support:
        raise Task16GrammarError(f"no color evidence for species {target!r}")
    top = max(support.values())
    majority = {c for c, k in support.items() if k == top}
    return Task16Analysis(
        entity=entity,
        species=target,
        color_support=dict(sorted(support.items())),
        label=sample.answer,
        ambiguous_by_count=len(majority) > 1 or sample.answer not in majority,
        multi_support=len(support) > 1,
    )


def ambiguity_rates(samples: list[Sample]) -> dict:
    """Both ambiguity rates over task-16 samples, plus per-sample analyses.

    Samples outside the task-16 grammar are listed, not fatal.
    """
    analyses: list[Task16Analysis] = []
    rejected: list[int] = []
    for idx, s in enumerate(samples):
        try:
            analyses.append(detect_task16_ambiguity(s))
        except Task16GrammarError:
            rejected.append(idx)
    n = len(analyses)
    return {
        "samples": n,
        "rejected": rejected,
        "rate_by_count": (sum(a.ambiguous_by_count for a in analyses) / n) if n else None,
        "rate_multi_support": (sum(a.multi_support for a in analyses) / n) if n else None,
        "rate_either": (sum(a.ambiguous_either for a in analyses) / n) if n else None,
        "analyses": analyses,
    }


# ---------------------------------------------------------------------------
# corpus loading


SPLITS = ("train", "valid", "test")


@dataclass
class Corpus:
    train: list[Sample] = field(default_factory=list)
    valid: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)

    def split(self, name: str) -> list[Sample]:
        return getattr(self, name)


def find_split_file(corpus_dir: Path, task: int, split: str) -> Path:
    corpus_dir = Path(corpus_dir)
    plain = corpus_dir / f"qa{task}_{split}.txt"
    if plain.exists():
        return plain
    named = sorted(corpus_dir.glob(f"qa{task}_*_{split}.txt"))
    if named:
        return named[0]
    raise FileNotFoundError(f"missing corpus file {plain} (task {task}, split {split})")


def load_corpus(corpus_dir, tasks=range(1, 21)) -> Corpus:
    """Read the published per-task split files; never reshuffles across splits."""
    corpus = Corpus()
    for task in tasks:
        for split in SPLITS:
            path = find_split_file(Path(corpus_dir), task, split)
            stories = parse_babi_file(path.read_text(), name=str(path))
            corpus.split(split).extend(extract_samples(stories, task))
    return corpus


def encode_corpus(corpus: Corpus, vocab: Vocabulary,
                  context_size: int = CONTEXT_SIZE) -> dict[str, list[EncodedSample]]:
    return {
        split: [encode_sample(preprocess_context(s, context_size), vocab)
                for s in corpus.split(split)]
        for split in SPLITS
    }
