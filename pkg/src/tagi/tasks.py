"""Synthetic instruction-following tasks over short lowercase strings.

Each family pairs a natural-language definition with a string
transformation. Instances are pure functions of (suite seed, task id,
index), so any worker can regenerate any slice of a task.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable

from .errors import ConfigError, ContractError, DegenerateInputError, VocabularyError
from .model import BOS_ID, EOS_ID, PAD_ID, SEP_ID
from .rng import Rng, derive_seed

SEP_CHAR = "\x1f"
LETTERS = "abcdefghijklmnopqrstuvwxyz"
VOWELS = set("aeiou")


class Tokenizer:
    """Printable ASCII (ids 0..94) plus PAD, BOS, EOS, SEP."""

    vocab_size = 99
    pad_id, bos_id, eos_id, sep_id = PAD_ID, BOS_ID, EOS_ID, SEP_ID

    def encode(self, text: str) -> list[int]:
        ids = []
        for ch in text:
            if ch == SEP_CHAR:
                ids.append(SEP_ID)
                continue
            o = ord(ch)
            if not 32 <= o <= 126:
                raise VocabularyError(f"character {ch!r} is not in the vocabulary")
            ids.append(o - 32)
        return ids

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == SEP_ID:
                out.append(SEP_CHAR)
            elif 0 <= i < 95:
                out.append(chr(i + 32))
        return "".join(out)


TOKENIZER = Tokenizer()


# ---------------------------------------------------------------- families

def _rot(s: str, k: int) -> str:
    return "".join(LETTERS[(LETTERS.index(c) + k) % 26] for c in s)


def _swap_pairs(s: str) -> str:
    out = []
    for i in range(0, len(s) - 1, 2):
        out += [s[i + 1], s[i]]
    if len(s) % 2:
        out.append(s[-1])
    return "".join(out)


FAMILIES: dict[str, tuple[str, Callable[[str], str]]] = {
    "copy": ("copy the input exactly", lambda s: s),
    "reverse": ("reverse the order of the characters in the input", lambda s: s[::-1]),
    "uppercase-shift": ("convert every letter of the input to uppercase", str.upper),
    "rot-1": ("shift every letter forward by one in the alphabet", lambda s: _rot(s, 1)),
    "duplicate-each-char": ("write every character of the input twice",
                            lambda s: "".join(c + c for c in s)),
    "first-half": ("output the first half of the input", lambda s: s[: (len(s) + 1) // 2]),
    "last-char": ("output only the last character of the input", lambda s: s[-1]),
    "sort-chars": ("sort the characters of the input in ascending order",
                   lambda s: "".join(sorted(s))),
    "remove-vowels": ("remove every vowel from the input",
                      lambda s: "".join(c for c in s if c not in VOWELS)),
    "swap-pairs": ("swap each pair of adjacent characters in the input", _swap_pairs),
    "append-length-digit": ("append the length of the input as a digit",
                            lambda s: s + str(len(s))),
    "surround-with-brackets": ("surround the input with square brackets", lambda s: f"[{s}]"),
}

TEST_FAMILIES: dict[str, tuple[str, Callable[[str], str]]] = {
    "sort-chars-descending": ("sort the characters of the input in descending order",
                              lambda s: "".join(sorted(s, reverse=True))),
    "rot-2": ("shift every letter forward by two in the alphabet", lambda s: _rot(s, 2)),
}

VALID_IDS = ("append-length-digit", "surround-with-brackets")
TRAIN_POOL = tuple(k for k in FAMILIES if k not in VALID_IDS)


@dataclass(frozen=True)
class Instance:
    source: str
    target: str


@dataclass
class Task:
    id: str
    definition: str
    transform: Callable[[str], str]
    split: str
    seed: int
    n_instances: int
    min_len: int = 2
    max_len: int = 6
    demos: list[Instance] = field(default_factory=list)

    def __post_init__(self):
        if not self.demos:
            rng = Rng(derive_seed(self.seed, self.id, "demos"))
            seen: set[str] = set()
            while len(self.demos) < 2:
                src = self._draw(rng)
                if src not in seen:
                    seen.add(src)
                    self.demos.append(Instance(src, self.transform(src)))

    def _draw(self, rng: Rng) -> str:
        while True:
            n = rng.randint(self.min_len, self.max_len)
            src = "".join(LETTERS[rng.randint(0, 25)] for _ in range(n))
            if self.transform(src):
                return src

    def instance(self, index: int) -> Instance:
        rng = Rng(derive_seed(self.seed, self.id, index))
        demo_sources = {d.source for d in self.demos}
        while True:
            src = self._draw(rng)
            if src not in demo_sources:
                return Instance(src, self.transform(src))

    def instances(self, n: int | None = None, start: int = 0) -> list[Instance]:
        n = self.n_instances if n is None else n
        return [self.instance(i) for i in range(start, start + n)]


@dataclass
class TaskSuite:
    meta_train: list[Task]
    meta_valid: list[Task]
    meta_test: list[Task]

    def split(self, name: str) -> list[Task]:
        key = {"train": "meta_train", "valid": "meta_valid", "test": "meta_test"}.get(name, name)
        if key not in ("meta_train", "meta_valid", "meta_test"):
            raise ConfigError(f"unknown split {name!r} (expected train, valid or test)")
        return getattr(self, key)

    def all_tasks(self) -> list[Task]:
        return self.meta_train + self.meta_valid + self.meta_test

    def get(self, task_id: str) -> Task:
        for t in self.all_tasks():
            if t.id == task_id:
                return t
        raise KeyError(task_id)


def build_suite(seed: int = 0, n_train_tasks: int = 8, n_train_instances: int = 1000,
                n_eval_instances: int = 100) -> TaskSuite:
    if not 1 <= n_train_tasks <= len(TRAIN_POOL):
        raise ConfigError(
            f"n_train_tasks={n_train_tasks} but only {len(TRAIN_POOL)} training families exist")

    def make(fid, fams, split, n):
        definition, fn = fams[fid]
        return Task(fid, definition, fn, split, seed, n)

    return TaskSuite(
        meta_train=[make(f, FAMILIES, "train", n_train_instances) for f in TRAIN_POOL[:n_train_tasks]],
        meta_valid=[make(f, FAMILIES, "valid", n_eval_instances) for f in VALID_IDS],
        meta_test=[make(f, TEST_FAMILIES, "test", n_eval_instances) for f in TEST_FAMILIES],
    )


# ---------------------------------------------------------------- formatting

@dataclass(frozen=True)
class Formatted:
    instruction: str
    source: str
    target: str


MODES = ("def", "def_2pos")


def render_instruction(task: Task, mode: str) -> str:
    if mode == "def":
        return task.definition
    if mode == "def_2pos":
        if len(task.demos) < 2:
            raise ContractError(f"task {task.id} has fewer than two demonstrations")
        parts = [task.definition]
        for d in task.demos[:2]:
            parts += [f"IN: {d.source}", f"OUT: {d.target}"]
        return SEP_CHAR.join(parts)
    raise ConfigError(f"unknown instruction mode {mode!r}")


def format_input(task: Task, instance: Instance, mode: str = "def") -> Formatted:
    if mode == "def_2pos" and any(d.source == instance.source for d in task.demos[:2]):
        raise ContractError(f"instance {instance.source!r} is one of the demonstrations of {task.id}")
    return Formatted(render_instruction(task, mode), instance.source, instance.target)


def encode_target(text: str) -> list[int]:
    return TOKENIZER.encode(text) + [EOS_ID]


def teacher_input(instruction: str, source: str) -> list[int]:
    """Teacher consumes the plain concatenation (instruction ; input)."""
    return TOKENIZER.encode(instruction) + [SEP_ID] + TOKENIZER.encode(source)


def export_suite(suite: TaskSuite, out_dir: str, mode: str = "def") -> list[str]:
    """Write ``<split>/<task_id>.jsonl``, one instance per line."""
    written = []
    for task in suite.all_tasks():
        d = os.path.join(out_dir, task.split)
        os.makedirs(d, exist_ok=True)
        path = os.path.join(d, f"{task.id}.jsonl")
        demos = [[x.source, x.target] for x in task.demos[:2]] if mode == "def_2pos" else []
        with open(path, "w", encoding="utf-8") as fh:
            for inst in task.instances():
                fh.write(json.dumps({
                    "task_id": task.id, "split": task.split, "definition": task.definition,
                    "demos": demos, "source": inst.source, "target": inst.target,
                }) + "\n")
        written.append(path)
    return written


# ---------------------------------------------------------------- pretraining corpus

def _lexicon() -> tuple[list[str], list[str], list[str]]:
    rng = Rng(derive_seed("lexicon"))
    cons, vows = "bcdfghjklmnprstvwz", "aeiou"
    words: list[str] = []
    seen = set()
    while len(words) < 200:
        n = rng.randint(1, 3)
        w = "".join(rng.choice(cons) + rng.choice(vows) for _ in range(n))
        if rng.random() < 0.5:
            w += rng.choice(cons)
        if w not in seen and w not in ("the", "a"):
            seen.add(w)
            words.append(w)
    return words[:80], words[80:140], words[140:]


NOUNS, VERBS, ADJECTIVES = _lexicon()


def sentence(rng: Rng) -> str:
    return (f"the {rng.choice(ADJECTIVES)} {rng.choice(NOUNS)} {rng.choice(VERBS)} "
            f"the {rng.choice(NOUNS)}.")


def corpus_window(rng: Rng, window_len: int, min_seg: int = 4) -> list[int]:
    """A ``window_len``-token slice of seeded subject-verb-object text."""
    if window_len < 3 * min_seg:
        raise DegenerateInputError(f"window_len {window_len} < 3 * min_seg ({3 * min_seg})")
    text = ""
    offset = rng.randint(0, 24)
    while len(text) < offset + window_len:
        text += sentence(rng) + " "
    return TOKENIZER.encode(text[offset: offset + window_len])


@dataclass(frozen=True)
class PretrainSplit:
    a: list[int]
    b: list[int]
    c: list[int]


def split_abc(window: list[int], rng: Rng, min_seg: int = 4) -> PretrainSplit:
    """Cut a window into (a, b, c); the cut pair is uniform over valid pairs."""
    n = len(window)
    if n < 3 * min_seg:
        raise DegenerateInputError(f"window of {n} tokens cannot hold three segments of {min_seg}")
    while True:
        i = rng.randint(min_seg, n - min_seg)
        j = rng.randint(min_seg, n - min_seg)
        if j - i >= min_seg:
            break
    return PretrainSplit(list(window[:i]), list(window[i:j]), list(window[j:]))
