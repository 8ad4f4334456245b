"""Ingestion language: lexer, parser, registry manifest, compiler and renderer."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from .core import (COMPARATORS, Granularity, GranularityMismatch, IngestError, IngestPlan, OpSpec,
                   Predicate, Stage, insert_materialize, validate_chain, Materialize)
from .oplib import ALIASES, BUILTINS


class IngestSyntaxError(IngestError):
    def __init__(self, line: int, column: int, expected, got: str = ""):
        self.line, self.column = line, column
        self.expected = tuple(sorted(expected)) if not isinstance(expected, str) else (expected,)
        super().__init__(f"line {line}, column {column}: expected {' or '.join(self.expected)}"
                         + (f", got {got!r}" if got else ""))


class CompileError(IngestError):
    pass


class UnknownOperator(CompileError):
    pass


class BadArity(CompileError):
    pass


class UnknownStatement(CompileError):
    pass


class UnknownStage(CompileError):
    pass


class DuplicateName(CompileError):
    pass


class CyclicStages(CompileError):
    pass


class UnboundLabelPredicate(CompileError):
    pass


class DisconnectedPlan(CompileError):
    pass


# -- lexer --------------------------------------------------------------------------

@dataclass(frozen=True)
class Token:
    kind: str  # word | int | float | string | sym | eof
    text: str
    value: Any
    line: int
    col: int


_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>--[^\n]*)
  | (?P<float>-?\d+\.\d+(?:[eE][-+]?\d+)?(?![A-Za-z0-9_]))
  | (?P<int>-?\d+(?![A-Za-z0-9_\-.]))
  | (?P<word>[A-Za-z0-9_][A-Za-z0-9_\-]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*"|'(?:[^'\\\n]|\\.)*')
  | (?P<sym><=|>=|!=|[=<>,;()*+\-\[\]{}:])
""", re.VERBOSE)


def _unquote(text: str) -> str:
    body = text[1:-1]
    return re.sub(r"\\(.)", lambda m: {"n": "\n", "t": "\t"}.get(m.group(1), m.group(1)), body)


def tokenize(text: str) -> list[Token]:
    out, pos, line, line_start = [], 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if not m:
            raise IngestSyntaxError(line, col, {"token"}, text[pos])
        kind = m.lastgroup
        tok = m.group()
        if kind == "int":
            out.append(Token("int", tok, int(tok), line, col))
        elif kind == "float":
            out.append(Token("float", tok, float(tok), line, col))
        elif kind == "string":
            out.append(Token("string", tok, _unquote(tok), line, col))
        elif kind in ("word", "sym"):
            out.append(Token(kind, tok, tok, line, col))
        nl = tok.count("\n")
        if nl:
            line += nl
            line_start = pos + tok.rindex("\n") + 1
        pos = m.end()
    out.append(Token("eof", "", None, line, pos - line_start + 1))
    return out


# -- AST ------------------------------------------------------------------------------

@dataclass
class OperatorRef:
    name: str
    args: tuple = ()
    line: int = 0
    col: int = 0

    def text(self) -> str:
        if not self.args:
            return self.name
        return f"{self.name}({', '.join(render_literal(a) for a in self.args)})"


@dataclass
class Statement:
    name: str
    kind: str  # Select | Format | Store
    inputs: list
    clauses: list  # [(KEYWORD, OperatorRef | int | list[str])]
    line: int = 0
    col: int = 0


@dataclass
class PredicateAst:
    op_name: str
    cmp: str
    value: Any  # int, str, or ("now", offset)
    line: int = 0
    col: int = 0


@dataclass
class StageStmt:
    kind: str  # Create | Chain
    name: str
    upstream: list
    uses: list
    predicates: list
    line: int = 0
    col: int = 0


@dataclass
class Program:
    assignments: list = field(default_factory=list)  # [(name, Statement)]
    stage_stmts: list = field(default_factory=list)

    def statement(self, name: str) -> Statement:
        for n, s in self.assignments:
            if n == name:
                return s
        raise UnknownStatement(name)


SELECT_CLAUSES = ("USING", "WHERE", "REPLICATE BY")
FORMAT_CLAUSES = ("PARTITION BY", "CHUNK BY", "ORDER BY", "SERIALIZE AS")
STORE_CLAUSES = ("LOCATE USING", "UPLOAD TO")
CLAUSE_KIND = {
    "USING": "parse", "WHERE": "filter", "PROJECT": "project", "REPLICATE BY": "replicate",
    "PARTITION BY": "partition", "CHUNK BY": "chunk", "ORDER BY": "order",
    "SERIALIZE AS": "serialize", "LOCATE USING": "locate", "UPLOAD TO": "upload",
}


# -- parser ---------------------------------------------------------------------------

class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def fail(self, expected):
        t = self.tok
        raise IngestSyntaxError(t.line, t.col, expected if not isinstance(expected, str) else {expected},
                                t.text or "end of input")

    def is_kw(self, word: str, k: int = 0) -> bool:
        t = self.peek(k) if k else self.tok
        return t.kind == "word" and t.text.upper() == word

    def is_phrase(self, phrase: str) -> bool:
        return all(self.is_kw(w, k) for k, w in enumerate(phrase.split()))

    def expect_phrase(self, phrase: str):
        for w in phrase.split():
            if not self.is_kw(w):
                self.fail({phrase})
            self.i += 1

    def is_sym(self, s: str) -> bool:
        return self.tok.kind == "sym" and self.tok.text == s

    def expect_sym(self, s: str):
        if not self.is_sym(s):
            self.fail({repr(s)})
        self.i += 1

    def ident(self, what: str = "identifier") -> Token:
        if self.tok.kind != "word":
            self.fail({what})
        t = self.tok
        self.i += 1
        return t

    def ident_list(self) -> list[str]:
        names = [self.ident().text]
        while self.is_sym(","):
            self.i += 1
            names.append(self.ident().text)
        return names

    def literal(self):
        t = self.tok
        if t.kind in ("int", "float", "string"):
            self.i += 1
            return t.value
        if t.kind == "word":
            self.i += 1
            return t.text
        self.fail({"literal"})

    def opref(self) -> OperatorRef:
        t = self.tok
        if t.kind != "word":
            self.fail({"operator reference"})
        self.i += 1
        args = []
        if self.is_sym("("):
            self.i += 1
            args.append(self.literal())
            while self.is_sym(","):
                self.i += 1
                args.append(self.literal())
            self.expect_sym(")")
        return OperatorRef(t.text, tuple(args), t.line, t.col)

    def program(self) -> Program:
        prog = Program()
        while self.tok.kind != "eof":
            if self.tok.kind == "word" and self.peek().kind == "sym" and self.peek().text == "=":
                name = self.tok
                self.i += 2
                prog.assignments.append((name.text, self.statement(name)))
            elif self.is_phrase("CREATE STAGE") or self.is_phrase("CHAIN STAGE"):
                prog.stage_stmts.append(self.stage_stmt())
            else:
                self.fail({"assignment", "CREATE STAGE", "CHAIN STAGE"})
        return prog

    def statement(self, name: Token) -> Statement:
        t = self.tok
        if self.is_kw("SELECT"):
            self.i += 1
            st = self.select(name.text)
        elif self.is_kw("FORMAT"):
            self.i += 1
            inputs = self.ident_list()
            clauses = []
            while True:
                phrase = next((p for p in FORMAT_CLAUSES if self.is_phrase(p)), None)
                if phrase is None:
                    break
                self.expect_phrase(phrase)
                clauses.append((phrase, self.opref()))
            if not clauses:
                self.fail(set(FORMAT_CLAUSES))
            st = Statement(name.text, "Format", inputs, clauses)
        elif self.is_kw("STORE"):
            self.i += 1
            inputs = self.ident_list()
            clauses = []
            for phrase in STORE_CLAUSES:
                if self.is_phrase(phrase):
                    self.expect_phrase(phrase)
                    clauses.append((phrase, self.opref()))
            st = Statement(name.text, "Store", inputs, clauses)
        else:
            self.fail({"SELECT", "FORMAT", "STORE"})
        self.expect_sym(";")
        st.line, st.col = name.line, name.col
        return st

    def select(self, name: str) -> Statement:
        clauses = []
        if self.is_sym("*"):
            self.i += 1
        else:
            attrs = [self.ident("projection").text]
            while self.is_sym(","):
                self.i += 1
                attrs.append(self.ident("attribute").text)
            clauses.append(("PROJECT", attrs))
        self.expect_phrase("FROM")
        inputs = [self.ident().text]
        for phrase in ("USING", "WHERE"):
            if self.is_phrase(phrase):
                self.expect_phrase(phrase)
                clauses.append((phrase, self.opref()))
        if self.is_phrase("REPLICATE BY"):
            self.expect_phrase("REPLICATE BY")
            if self.tok.kind == "int":
                clauses.append(("REPLICATE BY", self.tok.value))
                self.i += 1
            else:
                clauses.append(("REPLICATE BY", self.opref()))
        return Statement(name, "Select", inputs, clauses)

    def stage_stmt(self) -> StageStmt:
        t = self.tok
        if self.is_kw("CREATE"):
            self.expect_phrase("CREATE STAGE")
            name = self.ident("stage name").text
            upstream, kind = [], "Create"
        else:
            self.expect_phrase("CHAIN STAGE")
            name = self.ident("stage name").text
            self.expect_phrase("TO")
            upstream, kind = self.ident_list(), "Chain"
        self.expect_phrase("USING")
        uses = self.ident_list()
        preds = []
        if self.is_kw("WHERE"):
            self.i += 1
            preds.append(self.predicate())
            while self.is_sym(","):
                self.i += 1
                preds.append(self.predicate())
        self.expect_sym(";")
        return StageStmt(kind, name, upstream, uses, preds, t.line, t.col)

    def predicate(self) -> PredicateAst:
        t = self.tok
        if t.kind != "word" or not t.text.startswith("l_") or len(t.text) < 3:
            self.fail({"label predicate l_<op>"})
        self.i += 1
        op = t.text[2:]
        if not (self.tok.kind == "sym" and self.tok.text in COMPARATORS):
            self.fail(set(COMPARATORS))
        cmp = self.tok.text
        self.i += 1
        v = self.tok
        if v.kind in ("int", "string"):
            self.i += 1
            value = v.value
        elif v.kind == "word" and re.fullmatch(r"now(?:[+-]\d+)?", v.text):
            self.i += 1
            offset = int(v.text[3:] or 0)
            if v.text == "now":
                if self.is_sym("+") or self.is_sym("-"):
                    sign = 1 if self.tok.text == "+" else -1
                    self.i += 1
                    if self.tok.kind != "int":
                        self.fail({"integer"})
                    offset = sign * self.tok.value
                    self.i += 1
                elif self.tok.kind == "int" and self.tok.text.startswith("-"):
                    offset = self.tok.value
                    self.i += 1
            value = ("now", offset)
        else:
            self.fail({"integer", "string", "now"})
        return PredicateAst(op, cmp, value, t.line, t.col)


def parse_program(text: str) -> Program:
    return _Parser(text).program()


# -- literals and the registry manifest ---------------------------------------------------

def render_literal(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    s = str(value)
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


class _ValueParser:
    """Values in manifest entries: numbers, strings, bare words, [lists] and {maps}."""

    def __init__(self, tokens: list[Token]):
        self.toks, self.i = tokens, 0

    @property
    def tok(self):
        return self.toks[self.i]

    def take(self, sym: str):
        if not (self.tok.kind == "sym" and self.tok.text == sym):
            raise IngestSyntaxError(self.tok.line, self.tok.col, {repr(sym)}, self.tok.text)
        self.i += 1

    def value(self):
        t = self.tok
        if t.kind == "sym" and t.text in "[{":
            close = "]" if t.text == "[" else "}"
            self.i += 1
            items = []
            while not (self.tok.kind == "sym" and self.tok.text == close):
                if t.text == "[":
                    items.append(self.value())
                else:
                    k = self.value()
                    self.take(":")
                    items.append((k, self.value()))
                if self.tok.kind == "sym" and self.tok.text == ",":
                    self.i += 1
            self.i += 1
            return items if t.text == "[" else dict(items)
        if t.kind in ("int", "float", "string"):
            self.i += 1
            return t.value
        if t.kind == "word":
            self.i += 1
            return {"true": True, "false": False, "none": None}.get(t.text.lower(), t.text)
        raise IngestSyntaxError(t.line, t.col, {"value"}, t.text)


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    builtin: str
    params: tuple  # sorted (key, value) pairs; values kept as parsed


class Registry:
    def __init__(self, entries: Optional[dict] = None, text: str = ""):
        self.entries: dict[str, RegistryEntry] = dict(entries or {})
        self.text = text

    def __contains__(self, name):
        return name in self.entries

    def override(self, **changes: dict) -> "Registry":
        """Copy with some entries' params replaced, e.g. ``override(100mbBlocks=...)`` via dict unpacking."""
        entries = dict(self.entries)
        for name, params in changes.items():
            e = entries[name]
            merged = {**dict(e.params), **params}
            entries[name] = RegistryEntry(name, e.builtin, tuple(sorted(merged.items(), key=lambda kv: kv[0])))
        return Registry(entries, self.text)

    def merged(self, other: "Registry") -> "Registry":
        return Registry({**self.entries, **other.entries}, self.text + "\n" + other.text)

    def resolve(self, ref: OperatorRef) -> tuple[str, dict]:
        """(builtin id, params) for ``ref``; inline args override manifest defaults."""
        if ref.name in self.entries:
            e = self.entries[ref.name]
            builtin, params = e.builtin, dict(e.params)
        elif ref.name in BUILTINS:
            builtin, params = ref.name, {}
        elif ref.name in ALIASES:
            alias = ALIASES[ref.name]
            if isinstance(alias, tuple):
                builtin, params = alias[0], {"layout": alias[1]}
            else:
                builtin, params = alias, {}
        else:
            raise UnknownOperator(f"operator {ref.name!r} is neither registered nor builtin")
        cls = BUILTINS.get(builtin)
        if cls is None:
            raise UnknownOperator(f"{ref.name!r} refers to unknown builtin {builtin!r}")
        if ref.args:
            slots = list(cls.positional)
            if len(ref.args) > len(slots):
                raise BadArity(f"{ref.name} takes at most {len(slots)} arguments, got {len(ref.args)}")
            params.update(zip(slots, ref.args))
        return builtin, params


def parse_manifest(text: str) -> Registry:
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith("--"):
            continue
        m = re.fullmatch(r"([A-Za-z0-9_][A-Za-z0-9_\-]*)\s*=\s*([A-Za-z_][A-Za-z0-9_]*)\s*\((.*)\)\s*;?", line)
        if not m:
            raise IngestSyntaxError(lineno, 1, {"name = builtin(key=value, ...)"}, line)
        name, builtin, body = m.groups()
        if builtin not in BUILTINS:
            raise UnknownOperator(f"manifest line {lineno}: unknown builtin {builtin!r}")
        toks = tokenize(body)
        vp = _ValueParser(toks)
        params = {}
        while vp.tok.kind != "eof":
            key = vp.tok
            if key.kind != "word":
                raise IngestSyntaxError(lineno, key.col, {"key"}, key.text)
            vp.i += 1
            vp.take("=")
            params[key.text] = vp.value()
            if vp.tok.kind == "sym" and vp.tok.text == ",":
                vp.i += 1
        entries[name] = RegistryEntry(name, builtin, tuple(sorted(params.items(), key=lambda kv: kv[0])))
    return Registry(entries, text)


PROGRAM_DIR = Path(__file__).parent / "programs"


def default_registry() -> Registry:
    return parse_manifest((PROGRAM_DIR / "registry.manifest").read_text())


def resolve_operator_ref(ref: OperatorRef, registry: Registry) -> Callable[..., Any]:
    """Factory producing a fresh operator per call."""
    builtin, params = registry.resolve(ref)
    cls = BUILTINS[builtin]

    def factory(name: Optional[str] = None, seq: int = 0):
        return cls(name=name or ref.name, seq=seq, **params)

    factory.builtin = builtin
    factory.params = params
    return factory


# -- compiler ------------------------------------------------------------------------------

def _clause_ops(stmt: Statement, registry: Registry, counters: dict, seq: list) -> list[OpSpec]:
    ops = []
    order = {"PROJECT": 2, "USING": 0, "WHERE": 1, "REPLICATE BY": 3}
    clauses = stmt.clauses
    if stmt.kind == "Select":
        # parser -> filter -> projection -> replicator
        clauses = sorted(clauses, key=lambda c: order[c[0]])
    for keyword, arg in clauses:
        kind = CLAUSE_KIND[keyword]
        counters[kind] = counters.get(kind, 0) + 1
        name = f"{kind}{counters[kind]}"
        if keyword == "PROJECT":
            builtin, params, text = "project", {"attrs": list(arg)}, ",".join(arg)
        elif keyword == "REPLICATE BY" and isinstance(arg, int):
            builtin, params, text = "replicate_k", {"k": arg}, str(arg)
        else:
            builtin, params = registry.resolve(arg)
            text = arg.text()
        # names follow the clause (l_replicate1), behavior follows the operator class
        op_kind = BUILTINS[builtin](name=name, seq=0, **params).kind
        ops.append(OpSpec(name, op_kind, builtin, params, seq[0], text, stmt.name))
        seq[0] += 1
    return ops


def _resolve_predicate(p: PredicateAst, visible: list[OpSpec], source_labels, env) -> Predicate:
    names = {op.name for op in visible} | set(source_labels)
    op_name = p.op_name
    if op_name not in names:
        # allow the operator's registry name when it identifies one upstream operator
        hits = [op.name for op in visible if op.ref_text.split("(")[0] == op_name]
        if len(hits) != 1:
            raise UnboundLabelPredicate(f"line {p.line}: l_{p.op_name} has no upstream operator")
        op_name = hits[0]
    value = p.value
    if isinstance(value, tuple):
        value = int(env.get("now", 0)) + value[1]
    return Predicate(op_name, p.cmp, value)


def _implicit_stages(program: Program) -> list[StageStmt]:
    names = {n for n, _ in program.assignments}
    out = []
    for n, st in program.assignments:
        ups = [i for i in st.inputs if i in names]
        out.append(StageStmt("Chain" if ups else "Create", n, ups, [n], [], st.line, st.col))
    return out


def _topo(stmts: list[StageStmt]) -> list[StageStmt]:
    by_name = {s.name: s for s in stmts}
    indeg = {s.name: len(s.upstream) for s in stmts}
    down: dict[str, list[str]] = {s.name: [] for s in stmts}
    for s in stmts:
        for u in s.upstream:
            down[u].append(s.name)
    rank = {s.name: i for i, s in enumerate(stmts)}
    ready = sorted((n for n, d in indeg.items() if d == 0), key=rank.get)
    order = []
    while ready:
        n = ready.pop(0)
        order.append(by_name[n])
        for m in down[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
                ready.sort(key=rank.get)
    if len(order) != len(stmts):
        stuck = sorted(n for n, d in indeg.items() if d > 0)
        raise CyclicStages(f"stages {stuck} form a cycle")
    return order


def compile_to_plan(program: Program, registry: Optional[Registry] = None, *, env: Optional[dict] = None,
                    source_labels=("input",), plan_id: str = "plan") -> IngestPlan:
    registry = registry if registry is not None else default_registry()
    env = dict(env or {})
    seen = set()
    for n, _ in program.assignments:
        if n in seen:
            raise DuplicateName(f"statement {n!r} assigned twice")
        seen.add(n)
    counters: dict = {}
    seq = [0]
    stmt_ops = {n: _clause_ops(st, registry, counters, seq) for n, st in program.assignments}
    stmts = program.stage_stmts or _implicit_stages(program)
    names = [s.name for s in stmts]
    if len(set(names)) != len(names):
        raise DuplicateName("stage names must be unique")
    for s in stmts:
        for u in s.upstream:
            if u not in names:
                raise UnknownStage(f"line {s.line}: stage {s.name!r} chains to unknown stage {u!r}")
        for use in s.uses:
            if use not in stmt_ops:
                raise UnknownStatement(f"line {s.line}: stage {s.name!r} uses unknown statement {use!r}")
    ordered = _topo(stmts)
    stages: dict[str, Stage] = {}
    out_gran: dict[str, Granularity] = {}
    out_schema: dict = {}
    for s in ordered:
        ops = [OpSpec(o.name, o.kind, o.builtin, dict(o.params), o.seq, o.ref_text, o.statement)
               for use in s.uses for o in stmt_ops[use]]
        visible = [op for a in _ancestors(s.name, stmts) for op in stages[a].ops]
        preds = [_resolve_predicate(p, visible, source_labels, env) for p in s.predicates]
        if s.upstream:
            grans = {out_gran[u] for u in s.upstream}
            if len(grans) > 1:
                raise GranularityMismatch(f"stage {s.name!r} unions {sorted(g.value for g in grans)}")
            g_in = grans.pop()
            schema = out_schema[s.upstream[0]]
        else:
            g_in, schema = Granularity.FILE, None
        g, sch = g_in, schema
        if ops:
            protos = [op.prototype for op in ops]
            problems = validate_chain(protos, g_in, schema)
            if problems:
                raise GranularityMismatch(f"stage {s.name!r}: " + "; ".join(problems))
            for p in protos:
                g = p.output_granularity(g)
                try:
                    sch = p.output_schema(sch)
                except IngestError:
                    sch = None
        out_gran[s.name], out_schema[s.name] = g, sch
        stages[s.name] = Stage(s.name, ops, preds, list(s.upstream), list(s.uses))
    plan = IngestPlan(stages, program, registry.text, env, tuple(source_labels), plan_id)
    _check_connected(plan)
    return insert_materialize(plan)


def _ancestors(name: str, stmts: list[StageStmt]) -> list[str]:
    by = {s.name: s for s in stmts}
    out, todo = [], list(by[name].upstream)
    while todo:
        n = todo.pop()
        if n not in out:
            out.append(n)
            todo.extend(by[n].upstream)
    return out


def _check_connected(plan: IngestPlan):
    names = list(plan.stages)
    if not names:
        return
    adj = {n: set(plan.stages[n].upstream) for n in names}
    for n in names:
        for u in plan.stages[n].upstream:
            adj[u].add(n)
    seen, todo = set(), [names[0]]
    while todo:
        n = todo.pop()
        if n not in seen:
            seen.add(n)
            todo.extend(adj[n])
    if len(seen) != len(names):
        raise DisconnectedPlan(f"stages {sorted(set(names) - seen)} are not connected to the rest")


def compile_text(text: str, registry: Optional[Registry] = None, **kw) -> IngestPlan:
    return compile_to_plan(parse_program(text), registry, **kw)


def load_program(name: str) -> str:
    p = Path(name)
    if not p.exists():
        p = PROGRAM_DIR / (name if name.endswith(".ingest") else f"{name}.ingest")
    return p.read_text()


# -- rendering ------------------------------------------------------------------------------

def render_statement(name: str, st: Statement) -> str:
    parts = [name, "="]
    if st.kind == "Select":
        proj = next((c[1] for c in st.clauses if c[0] == "PROJECT"), None)
        parts += ["SELECT", ",".join(proj) if proj else "*", "FROM", st.inputs[0]]
        for kw in SELECT_CLAUSES:
            for k, arg in st.clauses:
                if k == kw:
                    parts += [kw, str(arg) if isinstance(arg, int) else arg.text()]
    else:
        parts += ["FORMAT" if st.kind == "Format" else "STORE", ",".join(st.inputs)]
        for k, arg in st.clauses:
            parts += [k, arg.text()]
    return " ".join(parts) + ";"


def _render_pred(p: Predicate) -> str:
    v = p.value if isinstance(p.value, int) else render_literal(p.value)
    return f"l_{p.op_name}{p.cmp}{v}"


def _render_chain(stage: Stage) -> str:
    out = []
    if stage.entry_marker:
        out.append("|")
    for i, node in enumerate(stage.chain):
        if isinstance(node, Materialize):
            out.append("|")
        else:
            if i and not isinstance(stage.chain[i - 1], Materialize):
                out.append(">")
            out.append(node.name)
    return " ".join(out) if out else "(empty)"


def render_plan(plan: IngestPlan) -> str:
    lines = [f"-- plan {plan.plan_id} v{plan.version}"]
    for name in plan.topo_order():
        st = plan.stages[name]
        head = f"-- stage {name}"
        if st.upstream:
            head += " <- " + ",".join(st.upstream)
        if st.predicates:
            head += " [" + ", ".join(_render_pred(p) for p in st.predicates) + "]"
        lines.append(f"{head}: {_render_chain(st)}")
    prog = plan.program
    if prog is not None:
        for name, st in prog.assignments:
            lines.append(render_statement(name, st))
        if prog.stage_stmts:
            for name in plan.topo_order():
                st = plan.stages[name]
                if st.upstream:
                    text = f"CHAIN STAGE {name} TO {','.join(st.upstream)} USING {','.join(st.uses)}"
                else:
                    text = f"CREATE STAGE {name} USING {','.join(st.uses)}"
                if st.predicates:
                    text += " WHERE " + ", ".join(_render_pred(p) for p in st.predicates)
                lines.append(text + ";")
    return "\n".join(lines) + "\n"
