"""Self-contained shader export and a reference interpreter for testing it.

The exporter writes one C-like function

    vec3 eval_brdf(vec3 wi, vec3 wo, float params[P])

with every module's weights inlined as constant arrays and the MLP layers
spelled out as plain loops over multiply-adds; leaky ReLU becomes
max(x, slope*x). All inline literals are rounded to float32 before
printing, which budgets the export for 32-bit shader execution.

The interpreter executes exactly this dialect (declarations, for loops,
ternaries, and the intrinsic set dot/cross/normalize/min/max/pow/sqrt/
exp/sin/cos/vec3) on batched numpy values, so export fidelity can be
checked without a GPU.
"""

from __future__ import annotations

import re

import numpy as np

from . import brdf_core as bc
from .graph import ADD, MUL, SIG_OPERANDS, SIG_PARAMS, TERMINAL, EnhancedModel


def _f(x):
    """Literal formatting: shortest repr of the float32 rounding."""
    v = float(np.float32(x))
    if v == int(v) and abs(v) < 1e9:
        return f"{v:.1f}"
    return repr(v)


# ---------------------------------------------------------------------------
# Emission.

_PARAM_COMMENTS = (
    "diffuse albedo rgb",
    "specular albedo rgb",
    "roughness alpha_x, alpha_y",
    "normal-incidence reflectance f0",
    "shading normal angles n_theta, n_phi",
    "tangent rotation t_theta",
)


def _emit_frame(lines):
    lines += [
        "    float sn = sin(params[9]);",
        "    vec3 n = vec3(sn * cos(params[10]), sn * sin(params[10]), cos(params[9]));",
        "    vec3 t0 = normalize(vec3(1.0, 0.0, 0.0) - n.x * n);",
        "    vec3 t = t0 * cos(params[11]) + cross(n, t0) * sin(params[11]);",
        "    vec3 b = cross(n, t);",
        "    vec3 h = normalize(wi + wo);",
        "    float hx = dot(h, t);",
        "    float hy = dot(h, b);",
        "    float hz = dot(h, n);",
        "    float ci = dot(n, wi);",
        "    float co = dot(n, wo);",
    ]


def _term_code(model_name, term, out):
    ax, ay, f0 = "params[6]", "params[7]", "params[8]"
    if term == "diffuse":
        return [f"    vec3 {out} = vec3(params[0], params[1], params[2]) * {_f(1.0 / np.pi)};"]
    if term == "specular_albedo":
        return [f"    vec3 {out} = vec3(params[3], params[4], params[5]);"]
    if term == "ndf" and model_name in ("ggx", "toy3"):
        return [
            f"    float {out}_q = (hx / {ax}) * (hx / {ax}) + (hy / {ay}) * (hy / {ay}) + hz * hz;",
            f"    float {out} = hz > 0.0 ? 1.0 / ({_f(np.pi)} * {ax} * {ay} * {out}_q * {out}_q) : 0.0;",
        ]
    if term == "ndf" and model_name in ("cooktorrance", "ward"):
        tail = f"/ ({_f(np.pi)} * {ax} * {ay} * {out}_z2 * {out}_z2)" if model_name == "cooktorrance" else f"/ ({_f(np.pi)} * {ax} * {ay})"
        return [
            f"    float {out}_z2 = max(hz * hz, {_f(1e-16)});",
            f"    float {out}_e = exp(-((hx / {ax}) * (hx / {ax}) + (hy / {ay}) * (hy / {ay})) / {out}_z2);",
            f"    float {out} = hz > 0.0 ? {out}_e {tail} : 0.0;",
        ]
    if term == "fresnel":
        if model_name == "ward":
            return [f"    float {out} = 1.0;"]
        return [
            f"    float {out}_c = max(0.0, min(1.0, dot(wi, h)));",
            f"    float {out} = {f0} + (1.0 - {f0}) * pow(1.0 - {out}_c, 5.0);",
        ]
    if term == "shadowing":
        if model_name == "ward":
            return [f"    float {out} = 1.0;"]
        if model_name == "cooktorrance":
            return [
                f"    float {out}_vh = max(dot(wo, h), {_f(bc.COS_EPS)});",
                f"    float {out} = max(min(1.0, min(2.0 * hz * co / {out}_vh, 2.0 * hz * ci / {out}_vh)), 0.0);",
            ]
        lines = []
        for tag, wv in (("i", "wi"), ("o", "wo")):
            lines += [
                f"    float {out}_{tag}x = dot({wv}, t);",
                f"    float {out}_{tag}y = dot({wv}, b);",
                f"    float {out}_{tag}z = dot({wv}, n);",
                f"    float {out}_{tag}s = ({ax} * {out}_{tag}x) * ({ax} * {out}_{tag}x) + ({ay} * {out}_{tag}y) * ({ay} * {out}_{tag}y);",
                f"    float {out}_{tag}d = max({out}_{tag}z + sqrt({out}_{tag}z * {out}_{tag}z + {out}_{tag}s), {_f(1e-12)});",
                f"    float {out}_g{tag} = {out}_{tag}z > 0.0 ? 2.0 * {out}_{tag}z / {out}_{tag}d : 0.0;",
            ]
        lines.append(f"    float {out} = {out}_gi * {out}_go;")
        return lines
    if term == "recip_norm":
        if model_name == "ward":
            return [
                f"    float {out} = 0.25 / sqrt(max(ci, {_f(bc.COS_EPS)}) * max(co, {_f(bc.COS_EPS)}));"
            ]
        return [f"    float {out} = 0.25 / (max(ci, {_f(bc.COS_EPS)}) * max(co, {_f(bc.COS_EPS)}));"]
    raise ValueError(f"no shader template for term {term!r} of model {model_name!r}")


def _emit_const_matrix(name, arr, lines):
    arr = np.asarray(arr)
    if arr.ndim == 1:
        body = ", ".join(_f(v) for v in arr)
        lines.append(f"    const float {name}[{arr.shape[0]}] = {{{body}}};")
    else:
        rows = ", ".join("{" + ", ".join(_f(v) for v in row) + "}" for row in arr)
        lines.append(f"    const float {name}[{arr.shape[0]}][{arr.shape[1]}] = {{{rows}}};")


def _emit_module(model: EnhancedModel, node, slot_names, p_total, lines):
    m = model.modules[node.id]
    sid = node.id
    d_in = m.d_in
    lines.append(f"    // slot {sid}: neural module, layers {'-'.join(str(d) for d in m.dims)}")
    lines.append(f"    float x{sid}[{d_in}];")
    if node.input_signature == SIG_OPERANDS:
        off = 0
        for c in node.children:
            child, dim = slot_names[c], model.graph.nodes[c].out_dim
            if dim == 1:
                lines.append(f"    x{sid}[{off}] = {child};")
            else:
                for k, ax in enumerate("xyz"):
                    lines.append(f"    x{sid}[{off + k}] = {child}.{ax};")
            off += dim
    else:
        lines.append(f"    for (int i = 0; i < {p_total}; ++i) {{ x{sid}[i] = params[i]; }}")
        if node.input_signature != SIG_PARAMS:
            for k, ax in enumerate("xyz"):
                lines.append(f"    x{sid}[{p_total + k}] = wi.{ax};")
            for k, ax in enumerate("xyz"):
                lines.append(f"    x{sid}[{p_total + 3 + k}] = wo.{ax};")
    src = f"x{sid}"
    slope = _f(m.leaky_slope)
    for li, (w, bvec) in enumerate(zip(m.weights, m.biases)):
        fan_in, fan_out = w.shape
        wname, bname, aname = f"W{sid}_{li}", f"B{sid}_{li}", f"a{sid}_{li}"
        _emit_const_matrix(wname, w.T, lines)  # stored [out][in] for the loop below
        _emit_const_matrix(bname, bvec, lines)
        lines.append(f"    float {aname}[{fan_out}];")
        lines.append(f"    for (int i = 0; i < {fan_out}; ++i) {{")
        lines.append(f"        float acc = {bname}[i];")
        lines.append(f"        for (int j = 0; j < {fan_in}; ++j) {{ acc += {wname}[i][j] * {src}[j]; }}")
        if li != len(m.weights) - 1:
            lines.append(f"        {aname}[i] = max(acc, {slope} * acc);")
        else:
            lines.append(f"        {aname}[i] = acc;")
        lines.append("    }")
        src = aname
    if node.out_dim == 1:
        lines.append(f"    float {slot_names[node.id]} = {src}[0];")
    else:
        lines.append(f"    vec3 {slot_names[node.id]} = vec3({src}[0], {src}[1], {src}[2]);")


def emit_shader(model: EnhancedModel, fit_params=None, neural_params=None):
    """Render the model as one self-contained shader function (text)."""
    graph = model.graph
    p_total = bc.N_ANALYTICAL + model.p_neural
    lines = [
        f"// {graph.model_name} reflectance, state {model.state.to_string()}",
        "// params[0..11]: analytical (rho_d rgb, rho_s rgb, alpha_x, alpha_y, f0,",
        "//                n_theta, n_phi, t_theta); params[12..]: material latent code",
    ]
    if fit_params is not None:
        vals = list(np.asarray(fit_params).ravel())
        if neural_params is not None:
            vals += list(np.asarray(neural_params).ravel())
        lines.append("// fitted parameters: " + " ".join(_f(v) for v in vals))
    lines.append(f"vec3 eval_brdf(vec3 wi, vec3 wo, float params[{p_total}]) {{")
    needs_frame = any(
        model.state.bits[n.id] == 0 and n.kind == TERMINAL and n.term != "diffuse" and n.term != "specular_albedo"
        for n in graph.nodes
    )
    if needs_frame:
        _emit_frame(lines)
    slot_names = {n.id: f"s{n.id}" for n in graph.nodes}
    for node in graph.nodes:
        if model.state.bits[node.id] == 1:
            _emit_module(model, node, slot_names, p_total, lines)
        elif node.kind == TERMINAL:
            lines += _term_code(graph.model_name, node.term, slot_names[node.id])
        else:
            a, b = (slot_names[c] for c in node.children)
            dim = node.out_dim
            op = "+" if node.kind == ADD else "*"
            kind = "vec3" if dim == 3 else "float"
            lines.append(f"    {kind} {slot_names[node.id]} = {a} {op} {b};")
    root = slot_names[graph.root_id]
    if graph.nodes[graph.root_id].out_dim == 1:
        lines.append(f"    return vec3({root}, {root}, {root});")
    else:
        lines.append(f"    return {root};")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Reference interpreter. Values are numpy arrays batched on axis 0:
# floats are [B], vec3s are [B, 3]; literals stay python floats. Loop
# counters are plain ints; const weight tables index to scalars.

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?|\d+(?:[eE][-+]?\d+)?)"
    r"|(?P<id>[A-Za-z_]\w*)"
    r"|(?P<op>\+\+|\+=|-=|\*=|/=|<=|>=|==|!=|[-+*/<>?:=,;.{}()\[\]]))"
)


def _tokenize(src):
    src = re.sub(r"//[^\n]*", "", src)
    out, pos = [], 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if not m:
            if src[pos:].strip():
                raise SyntaxError(f"shader tokenizer stuck at {src[pos:pos+30]!r}")
            break
        pos = m.end()
        if m.lastgroup == "num":
            out.append(("num", m.group("num")))
        elif m.lastgroup == "id":
            out.append(("id", m.group("id")))
        else:
            out.append(("op", m.group("op")))
    out.append(("eof", ""))
    return out


class _Parser:
    def __init__(self, tokens):
        self.toks = tokens
        self.i = 0

    def peek(self, k=0):
        return self.toks[self.i + k]

    def next(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, val):
        t = self.next()
        if t[1] != val:
            raise SyntaxError(f"expected {val!r}, got {t[1]!r}")
        return t

    # --- expressions (precedence climbing) ---
    def expr(self):
        return self.ternary()

    def ternary(self):
        cond = self.compare()
        if self.peek()[1] == "?":
            self.next()
            a = self.ternary()
            self.expect(":")
            b = self.ternary()
            return ("ternary", cond, a, b)
        return cond

    def compare(self):
        left = self.addsub()
        while self.peek()[1] in ("<", ">", "<=", ">=", "==", "!="):
            op = self.next()[1]
            right = self.addsub()
            left = ("cmp", op, left, right)
        return left

    def addsub(self):
        left = self.muldiv()
        while self.peek()[1] in ("+", "-"):
            op = self.next()[1]
            left = ("bin", op, left, self.muldiv())
        return left

    def muldiv(self):
        left = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.next()[1]
            left = ("bin", op, left, self.unary())
        return left

    def unary(self):
        if self.peek()[1] == "-":
            self.next()
            return ("neg", self.unary())
        return self.postfix()

    def postfix(self):
        node = self.primary()
        while True:
            t = self.peek()
            if t[1] == "[":
                self.next()
                idx = self.expr()
                self.expect("]")
                node = ("index", node, idx)
            elif t[1] == ".":
                self.next()
                member = self.next()[1]
                node = ("member", node, member)
            else:
                return node

    def primary(self):
        t = self.next()
        if t[0] == "num":
            return ("lit", float(t[1]))
        if t[1] == "(":
            e = self.expr()
            self.expect(")")
            return e
        if t[0] == "id":
            if self.peek()[1] == "(":
                self.next()
                args = []
                if self.peek()[1] != ")":
                    args.append(self.expr())
                    while self.peek()[1] == ",":
                        self.next()
                        args.append(self.expr())
                self.expect(")")
                return ("call", t[1], args)
            return ("var", t[1])
        raise SyntaxError(f"unexpected token {t[1]!r}")

    # --- statements ---
    def block(self):
        self.expect("{")
        stmts = []
        while self.peek()[1] != "}":
            stmts.append(self.statement())
        self.expect("}")
        return stmts

    def _array_literal(self):
        self.expect("{")
        rows = []
        while True:
            if self.peek()[1] == "{":
                self.next()
                vals = []
                while self.peek()[1] != "}":
                    vals.append(self._signed_number())
                    if self.peek()[1] == ",":
                        self.next()
                self.expect("}")
                rows.append(vals)
            else:
                rows.append(self._signed_number())
            if self.peek()[1] == ",":
                self.next()
                continue
            break
        self.expect("}")
        return np.array(rows, dtype=np.float64)

    def _signed_number(self):
        neg = False
        if self.peek()[1] == "-":
            self.next()
            neg = True
        t = self.next()
        if t[0] != "num":
            raise SyntaxError(f"expected number in array literal, got {t[1]!r}")
        v = float(t[1])
        return -v if neg else v

    def statement(self):
        t = self.peek()
        if t[1] == "return":
            self.next()
            e = self.expr()
            self.expect(";")
            return ("return", e)
        if t[1] == "for":
            self.next()
            self.expect("(")
            self.expect("int")
            var = self.next()[1]
            self.expect("=")
            start = self.expr()
            self.expect(";")
            cond = self.expr()
            self.expect(";")
            self.expect("++")
            self.next()  # loop variable
            self.expect(")")
            body = self.block()
            return ("for", var, start, cond, body)
        if t[1] in ("const", "float", "vec3", "int"):
            const = t[1] == "const"
            if const:
                self.next()
            kind = self.next()[1]
            name = self.next()[1]
            dims = []
            while self.peek()[1] == "[":
                self.next()
                dims.append(int(self.next()[1]))
                self.expect("]")
            if self.peek()[1] == "=":
                self.next()
                if dims:
                    value = ("arraylit", self._array_literal())
                else:
                    value = self.expr()
                self.expect(";")
                return ("decl", kind, name, dims, value, const)
            self.expect(";")
            return ("decl", kind, name, dims, None, const)
        # assignment
        target = self.postfix()
        op = self.next()[1]
        if op not in ("=", "+=", "-=", "*=", "/="):
            raise SyntaxError(f"unexpected statement operator {op!r}")
        value = self.expr()
        self.expect(";")
        return ("assign", target, op, value)


def _parse_function(text):
    toks = _tokenize(text)
    p = _Parser(toks)
    # signature: vec3 eval_brdf(vec3 wi, vec3 wo, float params[P]) { ... }
    p.expect("vec3")
    name = p.next()[1]
    p.expect("(")
    args = []
    while p.peek()[1] != ")":
        p.next()  # type
        arg = p.next()[1]
        while p.peek()[1] == "[":
            p.next()
            p.next()
            p.expect("]")
        args.append(arg)
        if p.peek()[1] == ",":
            p.next()
    p.expect(")")
    body = p.block()
    return name, args, body


class ShaderProgram:
    """Parsed shader function, executable on batched inputs."""

    def __init__(self, text):
        self.name, self.args, self.body = _parse_function(text)

    def run(self, wi, wo, params):
        """Evaluate on [B, 3] directions and [B, P] parameters."""
        wi = np.atleast_2d(np.asarray(wi, dtype=np.float64))
        wo = np.atleast_2d(np.asarray(wo, dtype=np.float64))
        params = np.atleast_2d(np.asarray(params, dtype=np.float64))
        env = {self.args[0]: wi, self.args[1]: wo, self.args[2]: ("local", params)}
        try:
            _exec_block(self.body, env, wi.shape[0])
        except _Return as r:
            return r.value
        raise RuntimeError("shader function returned nothing")


class _Return(Exception):
    def __init__(self, value):
        self.value = value


def _exec_block(stmts, env, batch):
    for st in stmts:
        kind = st[0]
        if kind == "return":
            raise _Return(_eval(st[1], env))
        if kind == "decl":
            _, vtype, name, dims, value, const = st
            if dims:
                if value is not None:
                    env[name] = ("const", value[1])
                else:
                    env[name] = ("local", np.zeros((batch, *dims)))
            elif value is not None:
                env[name] = _eval(value, env)
            else:
                env[name] = 0.0
            continue
        if kind == "for":
            _, var, start, cond, body = st
            env[var] = int(_eval(start, env))
            while bool(_eval(cond, env)):
                _exec_block(body, env, batch)
                env[var] = env[var] + 1
            continue
        if kind == "assign":
            _, target, op, value = st
            v = _eval(value, env)
            _assign(target, op, v, env)
            continue
        raise RuntimeError(f"unhandled statement {kind}")
    return None


def _assign(target, op, value, env):
    if target[0] == "var":
        name = target[1]
        if op == "=":
            env[name] = value
        else:
            env[name] = _apply_aug(env[name], op, value)
        return
    if target[0] == "index":
        base, idx = target[1], _as_int(_eval(target[2], env))
        if base[0] != "var":
            raise RuntimeError("only simple array element assignment is supported")
        tag, arr = env[base[1]]
        if tag != "local":
            raise RuntimeError("cannot assign into const arrays")
        cur = arr[:, idx]
        arr[:, idx] = value if op == "=" else _apply_aug(cur, op, value)
        return
    raise RuntimeError(f"unsupported assignment target {target[0]}")


def _apply_aug(cur, op, value):
    if op == "+=":
        return cur + value
    if op == "-=":
        return cur - value
    if op == "*=":
        return cur * value
    if op == "/=":
        return cur / value
    raise RuntimeError(op)


def _as_int(v):
    if isinstance(v, (int, float)):
        return int(v)
    raise RuntimeError("array indices must be loop counters or literals")


_CALLS = {
    "dot": lambda a, b: np.einsum("ij,ij->i", a, b),
    "cross": lambda a, b: np.cross(a, b),
    "normalize": lambda a: a / np.linalg.norm(a, axis=1, keepdims=True),
    "max": np.maximum,
    "min": np.minimum,
    "pow": np.power,
    "sqrt": np.sqrt,
    "exp": np.exp,
    "sin": np.sin,
    "cos": np.cos,
}


def _eval(node, env):
    kind = node[0]
    if kind == "lit":
        return node[1]
    if kind == "var":
        v = env[node[1]]
        if isinstance(v, tuple):
            raise RuntimeError(f"array {node[1]} used without index")
        return v
    if kind == "neg":
        return -_eval(node[1], env)
    if kind == "bin":
        a, b = _eval(node[2], env), _eval(node[3], env)
        a, b = _broadcast_pair(a, b)
        if node[1] == "+":
            return a + b
        if node[1] == "-":
            return a - b
        if node[1] == "*":
            return a * b
        return a / b
    if kind == "cmp":
        a, b = _eval(node[2], env), _eval(node[3], env)
        op = node[1]
        if op == "<":
            return a < b
        if op == ">":
            return a > b
        if op == "<=":
            return a <= b
        if op == ">=":
            return a >= b
        if op == "==":
            return a == b
        return a != b
    if kind == "ternary":
        cond = _eval(node[1], env)
        a, b = _eval(node[2], env), _eval(node[3], env)
        if isinstance(cond, np.ndarray):
            return np.where(cond, a, b)
        return a if cond else b
    if kind == "index":
        base = node[1]
        idx = _as_int(_eval(node[2], env))
        if base[0] == "var":
            tag, arr = env[base[1]]
            if tag == "const":
                return arr[idx] if arr.ndim == 1 else ("constrow", arr[idx])
            return arr[:, idx]
        if base[0] == "index":  # second index on a const matrix row
            row = _eval(base, env)
            if isinstance(row, tuple) and row[0] == "constrow":
                return row[1][idx]
        row = _eval(base, env)
        if isinstance(row, tuple) and row[0] == "constrow":
            return row[1][idx]
        raise RuntimeError("unsupported indexing pattern")
    if kind == "member":
        v = _eval(node[1], env)
        return v[:, "xyz".index(node[2])]
    if kind == "call":
        name, args = node[1], node[2]
        if name == "vec3":
            vals = [_eval(a, env) for a in args]
            b = next((v.shape[0] for v in vals if isinstance(v, np.ndarray)), 1)
            cols = [np.broadcast_to(np.asarray(v, dtype=np.float64), (b,)) for v in vals]
            return np.stack(cols, axis=1)
        fn = _CALLS[name]
        return fn(*(_eval(a, env) for a in args))
    raise RuntimeError(f"unhandled expression node {kind}")


def _broadcast_pair(a, b):
    # scalar [B] against vec [B, 3]
    if isinstance(a, np.ndarray) and isinstance(b, np.ndarray):
        if a.ndim == 1 and b.ndim == 2:
            return a[:, None], b
        if a.ndim == 2 and b.ndim == 1:
            return a, b[:, None]
    return a, b


def run_shader(text, wi, wo, params):
    """Parse and evaluate exported shader text; returns [B, 3] (or (3,))."""
    prog = ShaderProgram(text)
    single = np.asarray(wi).ndim == 1
    out = prog.run(wi, wo, params)
    return out[0] if single else out
