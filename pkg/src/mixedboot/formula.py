"""Parser for the model mini-language.

    response ~ term + term + ... + (re_term + ... | group)

Terms are column names, powers ``x^k`` (1 <= k <= 4), interactions ``a:b``
and the intercept controls ``1`` / ``0``.  Exactly one random-effects
clause is allowed.
"""

from __future__ import annotations

import re

from .core import ModelSpec, Term
from .errors import FormulaSyntaxError, MultipleGroupClauses

_TOKEN = re.compile(r"\s*(?:(?P<name>[A-Za-z_.][A-Za-z0-9_.]*)|(?P<int>\d+)|(?P<op>[~+:^()|]))")
MAX_POWER = 4


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos == len(text):
            break
        m = _TOKEN.match(text, pos)
        if not m:
            raise FormulaSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind=None, value=None):
        tok = self.tokens[self.i]
        if (kind and tok[0] != kind) or (value and tok[1] != value):
            want = value or kind
            got = tok[1] or "end of formula"
            raise FormulaSyntaxError(f"expected {want!r}, found {got!r}", tok[2])
        self.i += 1
        return tok

    def factor(self) -> tuple[str, int]:
        name = self.take("name")[1]
        if self.peek()[1] == "^":
            self.take()
            kind, val, pos = self.peek()
            if kind != "int":
                raise FormulaSyntaxError("expected an integer power", pos)
            self.take()
            k = int(val)
            if not 1 <= k <= MAX_POWER:
                raise FormulaSyntaxError(f"power must be between 1 and {MAX_POWER}", pos)
            return name, k
        return name, 1

    def term(self):
        """A Term, or the intercept flag True/False for ``1``/``0``."""
        kind, val, pos = self.peek()
        if kind == "int":
            self.take()
            if val not in ("0", "1"):
                raise FormulaSyntaxError("only 0 or 1 may appear as a bare number", pos)
            return val == "1"
        factors = [self.factor()]
        while self.peek()[1] == ":":
            self.take()
            factors.append(self.factor())
        return Term(tuple(factors))

    def term_list(self, stop: set[str]):
        terms, intercept = [], True
        while True:
            t = self.term()
            if isinstance(t, bool):
                intercept = t
            elif t not in terms:
                terms.append(t)
            if self.peek()[1] in stop:
                return terms, intercept
            self.take("op", "+")


def parse_formula(text: str) -> ModelSpec:
    if not text or not text.strip():
        raise FormulaSyntaxError("empty formula", 0)
    ps = _Parser(text)
    response = ps.take("name")[1]
    ps.take("op", "~")
    fixed, fixed_icpt = [], True
    groups = []
    while True:
        kind, val, pos = ps.peek()
        if val == "(":
            ps.take()
            re_terms, re_icpt = ps.term_list({"|"})
            ps.take("op", "|")
            group = ps.take("name")[1]
            ps.take("op", ")")
            groups.append((re_terms, re_icpt, group, pos))
        else:
            t = ps.term()
            if isinstance(t, bool):
                fixed_icpt = t
            elif t not in fixed:
                fixed.append(t)
        kind, val, pos = ps.peek()
        if kind == "end":
            break
        ps.take("op", "+")
    if not groups:
        raise FormulaSyntaxError("missing random-effects clause '( ... | group)'", len(text))
    if len(groups) > 1:
        raise MultipleGroupClauses(
            f"only one random-effects clause is supported, found {len(groups)} "
            f"(second at character {groups[1][3]})"
        )
    re_terms, re_icpt, group, _ = groups[0]
    return ModelSpec(
        response=response,
        fixed_terms=tuple(fixed),
        random_terms=tuple(re_terms),
        group=group,
        fixed_intercept=fixed_icpt,
        random_intercept=re_icpt,
    )
