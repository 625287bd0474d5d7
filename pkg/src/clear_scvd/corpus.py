"""Contract corpora: lexing, vocabularies, encoding, JSONL ingestion and splits.

Also hosts the synthetic withdraw-ordering corpus used for desk-scale runs.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, MASK = 0, 1, 2
RESERVED_TOKENS = ("<PAD>", "<UNK>", "<MASK>")
NUM_TOKEN = "<NUM>"
STR_TOKEN = "<STR>"

LABEL_TAGS = ("RE", "TD", "IO", "ORDER")

DEFAULT_MAX_LEN = 256
DEFAULT_MIN_FREQUENCY = 2


class CorpusError(ValueError):
    """Malformed corpus or vocabulary input."""


# --------------------------------------------------------------------------- lexing

_OPERATORS = sorted(
    [
        ">>>=", "<<=", ">>=", ">>>", "**=", "==", "!=", "<=", ">=", "&&", "||",
        "++", "--", "+=", "-=", "*=", "/=", "%=", "|=", "&=", "^=", "<<", ">>",
        "=>", "->", "**", ":=",
    ],
    key=len,
    reverse=True,
)

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<line_comment>//[^\n]*)
  | (?P<block_comment>/\*.*?(?:\*/|\Z))
  | (?P<string>"(?:\\.|[^"\\\n])*"|'(?:\\.|[^'\\\n])*')
  | (?P<hex>0[xX][0-9a-fA-F_]+)
  | (?P<number>\d[\d_]*(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_$][A-Za-z0-9_$]*)
  | (?P<op>"""
    + "|".join(re.escape(op) for op in _OPERATORS)
    + r""")
  | (?P<other>.)
    """,
    re.VERBOSE | re.DOTALL,
)


def tokenize(source: str) -> list[str]:
    """Lex contract source into a flat token list.

    Comments and whitespace are dropped, numeric literals become ``<NUM>``,
    string literals become ``<STR>``. Any character not covered by a rule is
    emitted on its own, so the lexer never fails.
    """
    tokens: list[str] = []
    for match in _TOKEN_RE.finditer(source):
        kind = match.lastgroup
        if kind in ("ws", "line_comment", "block_comment"):
            continue
        if kind in ("hex", "number"):
            tokens.append(NUM_TOKEN)
        elif kind == "string":
            tokens.append(STR_TOKEN)
        else:
            tokens.append(match.group())
    return tokens


# ----------------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    min_frequency: int = DEFAULT_MIN_FREQUENCY
    corpus_hash: str = ""
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != RESERVED_TOKENS:
            raise CorpusError("vocabulary must start with the reserved tokens")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise CorpusError("duplicate token in vocabulary")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK)

    def as_dict(self) -> dict[str, int]:
        return dict(self._index)

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        lines = [f"# min_frequency={self.min_frequency} corpus_sha256={self.corpus_hash}"]
        lines.extend(self.tokens[3:])
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines or not lines[0].startswith("#"):
            raise CorpusError(f"{path}: missing vocabulary header line")
        header = dict(
            part.split("=", 1) for part in lines[0].lstrip("# ").split() if "=" in part
        )
        try:
            min_frequency = int(header["min_frequency"])
        except (KeyError, ValueError) as exc:
            raise CorpusError(f"{path}: bad vocabulary header {lines[0]!r}") from exc
        return cls(
            RESERVED_TOKENS + tuple(lines[1:]),
            min_frequency=min_frequency,
            corpus_hash=header.get("corpus_sha256", ""),
        )


def _hash_token_corpus(corpus: Sequence[Sequence[str]]) -> str:
    h = hashlib.sha256()
    for seq in corpus:
        h.update("\x1f".join(seq).encode("utf-8"))
        h.update(b"\x1e")
    return h.hexdigest()


def build_vocabulary(
    corpus: Sequence[Sequence[str]], min_frequency: int = DEFAULT_MIN_FREQUENCY
) -> Vocabulary:
    """Fit a vocabulary: reserved ids first, then by (-count, token)."""
    if len(corpus) == 0:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for seq in corpus for tok in seq)
    for reserved in RESERVED_TOKENS:
        counts.pop(reserved, None)
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_frequency),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(
        RESERVED_TOKENS + tuple(kept),
        min_frequency=min_frequency,
        corpus_hash=_hash_token_corpus(corpus),
    )


# ------------------------------------------------------------------------- encoding


@dataclass(frozen=True)
class EncodedContract:
    id: str
    token_ids: tuple[int, ...]
    original_length: int
    labels: dict = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.token_ids)

    def label(self, task: str) -> int:
        try:
            return self.labels[task]
        except KeyError:
            raise CorpusError(f"contract {self.id} has no label for task {task}") from None


def encode(
    tokens: Sequence[str],
    vocab: Vocabulary,
    max_len: int = DEFAULT_MAX_LEN,
    *,
    id: str = "",
    labels: dict | None = None,
) -> EncodedContract:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ids = tuple(vocab.id_of(tok) for tok in tokens[:max_len]) or (UNK,)
    return EncodedContract(id=id, token_ids=ids, original_length=len(tokens), labels=dict(labels or {}))


# ------------------------------------------------------------------------ ingestion


@dataclass(frozen=True)
class LabeledExample:
    id: str
    source: str
    labels: dict

    def to_json(self) -> str:
        return json.dumps(
            {"id": self.id, "source": self.source, "labels": self.labels},
            ensure_ascii=False,
            sort_keys=False,
        )


def _validate_record(record, lineno: int) -> LabeledExample:
    if not isinstance(record, dict):
        raise CorpusError(f"expected a JSON object at line {lineno}")
    for name in ("id", "source", "labels"):
        if name not in record:
            raise CorpusError(f"missing field {name} at line {lineno}")
    if not isinstance(record["id"], str) or not isinstance(record["source"], str):
        raise CorpusError(f"id and source must be strings at line {lineno}")
    labels = record["labels"]
    if not isinstance(labels, dict) or not labels:
        raise CorpusError(f"labels must be a non-empty object at line {lineno}")
    for tag, value in labels.items():
        if tag not in LABEL_TAGS:
            raise CorpusError(f"unknown label key {tag!r} at line {lineno}")
        if value not in (0, 1) or isinstance(value, bool):
            raise CorpusError(f"label {tag} must be 0 or 1 at line {lineno}")
    return LabeledExample(record["id"], record["source"], {k: int(v) for k, v in labels.items()})


def load_corpus(path: str | Path) -> list[LabeledExample]:
    examples: list[LabeledExample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"malformed JSON at line {lineno}: {exc.msg}") from None
            example = _validate_record(record, lineno)
            if example.id in seen:
                raise CorpusError(f"duplicate id {example.id!r} at line {lineno}")
            seen.add(example.id)
            examples.append(example)
    return examples


def save_corpus(examples: Iterable[LabeledExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


def corpus_hash(examples: Sequence[LabeledExample]) -> str:
    h = hashlib.sha256()
    for ex in examples:
        h.update(ex.to_json().encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


# ---------------------------------------------------------------------------- split


@dataclass(frozen=True)
class CorpusSplit:
    train: list
    test: list
    seed: int
    ratio: float

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        for part in (self.train, self.test):
            h.update("\x1f".join(str(item.id) for item in part).encode("utf-8"))
            h.update(b"\x1e")
        return h.hexdigest()


def split(corpus: Sequence, ratio: float = 0.8, seed: int = 0) -> CorpusSplit:
    """Seeded random train/test partition; the first floor(ratio*N) of the permutation train."""
    n = len(corpus)
    if n < 2:
        raise CorpusError("need at least two examples to split")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    n_train = min(max(math.floor(ratio * n + 1e-9), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train = [corpus[i] for i in perm[:n_train]]
    test = [corpus[i] for i in perm[n_train:]]
    return CorpusSplit(train=train, test=test, seed=seed, ratio=ratio)


def prepare(
    examples: Sequence[LabeledExample],
    *,
    ratio: float = 0.8,
    seed: int = 0,
    min_frequency: int = DEFAULT_MIN_FREQUENCY,
    max_len: int = DEFAULT_MAX_LEN,
    vocab: Vocabulary | None = None,
) -> tuple[Vocabulary, CorpusSplit]:
    """Split raw examples, fit the vocabulary on the train part, encode both parts."""
    parts = split(list(examples), ratio=ratio, seed=seed)
    train_tokens = [tokenize(ex.source) for ex in parts.train]
    if vocab is None:
        vocab = build_vocabulary(train_tokens, min_frequency)
    train = [
        encode(toks, vocab, max_len, id=ex.id, labels=ex.labels)
        for toks, ex in zip(train_tokens, parts.train)
    ]
    test = [encode(tokenize(ex.source), vocab, max_len, id=ex.id, labels=ex.labels) for ex in parts.test]
    return vocab, CorpusSplit(train=train, test=test, seed=seed, ratio=ratio)


def encode_examples(
    examples: Sequence[LabeledExample], vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN
) -> list[EncodedContract]:
    return [encode(tokenize(ex.source), vocab, max_len, id=ex.id, labels=ex.labels) for ex in examples]


# -------------------------------------------------------------- synthetic contracts

_CONTRACT_NAMES = ["Bank", "Vault", "Wallet", "Escrow", "Fund", "Treasury", "Pool", "Reserve"]
_BALANCE_NAMES = ["balances", "deposits", "credits", "funds", "userBalance", "ledger"]
_LOCK_NAMES = ["locked", "isLocked", "pending", "busy", "inWithdraw"]
_WITHDRAW_NAMES = ["withdraw", "withdrawFunds", "claim", "payout", "cashOut", "redeem"]
_AMOUNT_NAMES = ["amount", "value", "amt", "sum", "qty"]
_OWNER_NAMES = ["owner", "admin", "manager", "operator"]
_COUNTER_NAMES = ["total", "counter", "nonce", "supply", "count"]
_COMMENTS = [
    "// TODO: audit",
    "/* user funds */",
    "// keep in sync with frontend",
    "/* legacy entry point */",
]

_TRANSFER_FORMS = [
    "msg.sender.transfer({amt});",
    "require(msg.sender.call.value({amt})());",
    "require(msg.sender.send({amt}));",
]

_FILLERS = [
    (
        "function {fname}() public payable {{\n"
        "        {bal}[msg.sender] += msg.value;\n"
        "    }}"
    ),
    (
        "function {fname}() public view returns (uint256) {{\n"
        "        return {bal}[msg.sender];\n"
        "    }}"
    ),
    (
        "function {fname}(address {arg}) public {{\n"
        "        require(msg.sender == {owner});\n"
        "        {owner} = {arg};\n"
        "    }}"
    ),
    (
        "function {fname}() public {{\n"
        "        {counter} += {num};\n"
        "    }}"
    ),
    (
        "function {fname}(uint256 {arg}) public pure returns (bool) {{\n"
        "        return {arg} > {num};\n"
        "    }}"
    ),
]
_FILLER_NAMES = ["deposit", "getBalance", "setOwner", "bump", "check", "reset", "status", "update", "ping"]
_ARG_NAMES = ["who", "target", "x", "newOwner", "input"]


def _instance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def render_synthetic_contract(seed: int, index: int, vulnerable: bool) -> str:
    """Render template instance ``index`` of generator ``seed`` in one of its two orders.

    The instance (names, fillers, literals, statement forms) is fixed by
    (seed, index); ``vulnerable`` only decides whether the external transfer
    runs before or after the lock/balance bookkeeping in the withdraw function.
    """
    rng = _instance_rng(seed, index)

    def pick(pool):
        return pool[int(rng.integers(len(pool)))]

    names = {
        "cname": pick(_CONTRACT_NAMES) + str(int(rng.integers(1, 100))),
        "bal": pick(_BALANCE_NAMES),
        "lock": pick(_LOCK_NAMES),
        "wname": pick(_WITHDRAW_NAMES),
        "amt": pick(_AMOUNT_NAMES),
        "owner": pick(_OWNER_NAMES),
        "counter": pick(_COUNTER_NAMES),
    }
    lock_stmt = "{lock}[msg.sender] = true;".format(**names)
    update_stmt = "{bal}[msg.sender] -= {amt};".format(**names)
    transfer_stmt = pick(_TRANSFER_FORMS).format(**names)
    bookkeeping = [lock_stmt, update_stmt]
    if rng.random() < 0.5:
        bookkeeping.reverse()
    critical = [transfer_stmt] + bookkeeping if vulnerable else bookkeeping + [transfer_stmt]
    critical.append("{lock}[msg.sender] = false;".format(**names))

    withdraw = (
        "function {wname}(uint256 {amt}) public {{\n"
        "        require(!{lock}[msg.sender]);\n"
        "        require({bal}[msg.sender] >= {amt});\n"
        "        " + "\n        ".join(critical) + "\n"
        "    }}"
    ).format(**names)

    filler_ids = rng.choice(len(_FILLERS), size=int(rng.integers(0, 3)), replace=False)
    filler_names = rng.choice(len(_FILLER_NAMES), size=len(filler_ids), replace=False)
    fillers = [
        _FILLERS[int(fi)].format(
            fname=_FILLER_NAMES[int(ni)],
            arg=pick(_ARG_NAMES),
            num=int(rng.integers(0, 10_000)),
            **names,
        )
        for fi, ni in zip(filler_ids, filler_names)
    ]
    # fixed-length header and withdraw first: the critical block sits at a stable offset
    header = [
        "contract {cname} {{".format(**names),
        "    mapping(address => uint256) public {bal};".format(**names),
        "    mapping(address => bool) {lock};".format(**names),
        "    address {owner};".format(**names),
        "    uint256 {counter};".format(**names),
    ]
    if rng.random() < 0.3:
        header.append("    " + pick(_COMMENTS))
    body = [withdraw] + fillers
    return "\n".join(header) + "\n\n" + "\n\n".join("    " + f for f in body) + "\n}\n"


def generate_synthetic_corpus(n: int, vuln_fraction: float = 0.3, seed: int = 0) -> list[LabeledExample]:
    """Withdraw-ordering corpus: exactly round(n * vuln_fraction) contracts carry ORDER=1."""
    if n < 10:
        raise ValueError("n must be >= 10")
    if not 0.0 < vuln_fraction < 1.0:
        raise ValueError("vuln_fraction must lie in (0, 1)")
    n_vuln = math.floor(n * vuln_fraction + 0.5)
    flags = np.zeros(n, dtype=bool)
    flags[np.random.default_rng(np.random.SeedSequence([seed, n])).permutation(n)[:n_vuln]] = True
    return [
        LabeledExample(
            id=f"synth-{seed}-{i:05d}",
            source=render_synthetic_contract(seed, i, bool(flags[i])),
            labels={"ORDER": int(flags[i])},
        )
        for i in range(n)
    ]
