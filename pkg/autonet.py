"""
autonet.py — Motor mínimo de redes com diferenciação reversa (numpy).

Só o necessário para o gerador, o discriminador e a rede de momentos:

  conv3x3(in, out)       convolução 3×3, padding periódico, com bias
  dense(in, out)         camada densa; achata a entrada [N, ...] → [N, in]
  relu / leaky_relu(α) / sigmoid
  depth_to_space(r)      [N, C·r², h, w] → [N, C, h·r, w·r]
  space_to_depth(r)      inversa da anterior
  residual_block(f)      x + conv(relu(conv(x))), f filtros
  append_noise(k)        concatena k canais de ruído fornecidos no forward

Convenção do depth_to_space: o canal de entrada c·r² + r·dy + dx vai para o
pixel (h·r + dy, w·r + dx) do canal de saída c.

As redes são funcionais: NetworkParams guarda a lista de camadas e os pesos;
net_forward grava uma Tape (se pedido) e net_backward a consome uma única vez.
Tudo em float64 e em lote [N, C, H, W].
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from errors import DatasetFormatError, FieldShapeError, NonFiniteError, TapeReuseError

CHECKPOINT_MAGIC = b"CGN1"
CHECKPOINT_VERSION = 1


# ── Tipos ─────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    args: tuple = ()


@dataclass
class NetworkParams:
    layers: tuple[LayerSpec, ...]
    weights: list[dict[str, np.ndarray]]

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            layers=tuple(self.layers),
            weights=[{k: v.copy() for k, v in w.items()} for w in self.weights],
        )

    def n_params(self) -> int:
        return sum(v.size for w in self.weights for v in w.values())

    def uses_noise(self) -> bool:
        return any(l.kind == "append_noise" for l in self.layers)

    def noise_channels(self) -> int:
        return sum(int(l.args[0]) for l in self.layers if l.kind == "append_noise")


@dataclass
class Tape:
    caches: list
    consumed: bool = False


@dataclass
class Gradients:
    params: list[dict[str, np.ndarray]]
    input: np.ndarray


# ── Rearranjos ────────────────────────────────────────────────────────────────

def depth_to_space(x: np.ndarray, r: int) -> np.ndarray:
    N, C, h, w = x.shape
    if C % (r * r):
        raise FieldShapeError(f"depth_to_space({r}): {C} canais não divisíveis por {r * r}")
    c = C // (r * r)
    return x.reshape(N, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(N, c, h * r, w * r)


def space_to_depth(x: np.ndarray, r: int) -> np.ndarray:
    N, c, H, W = x.shape
    if H % r or W % r:
        raise FieldShapeError(f"space_to_depth({r}): {H}×{W} não divisível por {r}")
    h, w = H // r, W // r
    return x.reshape(N, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(N, c * r * r, h, w)


# ── Camadas: init / forward / backward ───────────────────────────────────────

def _uniform(rng, shape, fan_in):
    lim = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=shape)


def _conv_init(c_in, c_out, rng, prefix=""):
    return {
        f"{prefix}w": _uniform(rng, (c_out, c_in, 3, 3), 9 * c_in),
        f"{prefix}b": np.zeros(c_out),
    }


def _shifted(x):
    # Nove cópias deslocadas: k = 3i + j lê x[h + i − 1, w + j − 1] (periódico).
    N, C, H, W = x.shape
    xs = np.stack(
        [np.roll(x, (1 - i, 1 - j), axis=(2, 3)) for i in range(3) for j in range(3)],
        axis=2,
    )
    return xs.reshape(N, C * 9, H * W)


def _conv_fwd(w, b, x):
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise FieldShapeError(f"conv3x3 espera [N, {w.shape[1]}, H, W], recebeu {x.shape}")
    N, C, H, W = x.shape
    xs = _shifted(x)
    y = np.matmul(w.reshape(w.shape[0], -1), xs) + b[None, :, None]
    return y.reshape(N, w.shape[0], H, W), (xs, x.shape)


def _conv_bwd(w, cache, gy):
    xs, (N, C, H, W) = cache
    O = w.shape[0]
    g = gy.reshape(N, O, H * W)
    gw = np.matmul(g, xs.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gb = g.sum(axis=(0, 2))
    gxs = np.matmul(w.reshape(O, -1).T, g).reshape(N, C, 9, H, W)
    gx = np.zeros((N, C, H, W))
    for k in range(9):
        i, j = divmod(k, 3)
        gx += np.roll(gxs[:, :, k], (i - 1, j - 1), axis=(2, 3))
    return gx, gw, gb


class _Layer:
    """Interface das camadas; args vêm de LayerSpec.args."""

    def init(self, args, rng) -> dict:
        return {}

    def forward(self, args, wts, x, noise):
        raise NotImplementedError

    def backward(self, args, wts, cache, gy):
        raise NotImplementedError


class _Conv3x3(_Layer):
    def init(self, args, rng):
        return _conv_init(int(args[0]), int(args[1]), rng)

    def forward(self, args, wts, x, noise):
        return _conv_fwd(wts["w"], wts["b"], x)

    def backward(self, args, wts, cache, gy):
        gx, gw, gb = _conv_bwd(wts["w"], cache, gy)
        return gx, {"w": gw, "b": gb}


class _Dense(_Layer):
    def init(self, args, rng):
        d_in, d_out = int(args[0]), int(args[1])
        return {"w": _uniform(rng, (d_in, d_out), d_in), "b": np.zeros(d_out)}

    def forward(self, args, wts, x, noise):
        flat = x.reshape(len(x), -1)
        if flat.shape[1] != wts["w"].shape[0]:
            raise FieldShapeError(
                f"dense espera {wts['w'].shape[0]} entradas por amostra, recebeu {flat.shape[1]}"
            )
        return flat @ wts["w"] + wts["b"], (flat, x.shape)

    def backward(self, args, wts, cache, gy):
        flat, shape = cache
        return (gy @ wts["w"].T).reshape(shape), {"w": flat.T @ gy, "b": gy.sum(axis=0)}


class _Relu(_Layer):
    def forward(self, args, wts, x, noise):
        mask = x > 0
        return x * mask, mask

    def backward(self, args, wts, cache, gy):
        return gy * cache, {}


class _LeakyRelu(_Layer):
    def forward(self, args, wts, x, noise):
        alpha = float(args[0])
        slope = np.where(x > 0, 1.0, alpha)
        return x * slope, slope

    def backward(self, args, wts, cache, gy):
        return gy * cache, {}


class _Sigmoid(_Layer):
    def forward(self, args, wts, x, noise):
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        return y, y

    def backward(self, args, wts, cache, gy):
        return gy * cache * (1.0 - cache), {}


class _DepthToSpace(_Layer):
    def forward(self, args, wts, x, noise):
        return depth_to_space(x, int(args[0])), None

    def backward(self, args, wts, cache, gy):
        return space_to_depth(gy, int(args[0])), {}


class _SpaceToDepth(_Layer):
    def forward(self, args, wts, x, noise):
        return space_to_depth(x, int(args[0])), None

    def backward(self, args, wts, cache, gy):
        return depth_to_space(gy, int(args[0])), {}


class _ResidualBlock(_Layer):
    def init(self, args, rng):
        f = int(args[0])
        return {**_conv_init(f, f, rng, "1"), **_conv_init(f, f, rng, "2")}

    def forward(self, args, wts, x, noise):
        h1, c1 = _conv_fwd(wts["1w"], wts["1b"], x)
        mask = h1 > 0
        h2, c2 = _conv_fwd(wts["2w"], wts["2b"], h1 * mask)
        return x + h2, (c1, mask, c2)

    def backward(self, args, wts, cache, gy):
        c1, mask, c2 = cache
        ga, gw2, gb2 = _conv_bwd(wts["2w"], c2, gy)
        gx1, gw1, gb1 = _conv_bwd(wts["1w"], c1, ga * mask)
        return gy + gx1, {"1w": gw1, "1b": gb1, "2w": gw2, "2b": gb2}


class _AppendNoise(_Layer):
    def forward(self, args, wts, x, noise):
        k = int(args[0])
        if noise is None:
            raise FieldShapeError("append_noise: rede precisa de ruído e nenhum foi passado")
        esperado = (x.shape[0], k, *x.shape[2:])
        if noise.shape != esperado:
            raise FieldShapeError(f"append_noise: ruído {noise.shape}, esperado {esperado}")
        return np.concatenate([x, noise], axis=1), x.shape[1]

    def backward(self, args, wts, cache, gy):
        return gy[:, :cache], {}


_LAYERS: dict[str, _Layer] = {
    "conv3x3": _Conv3x3(),
    "dense": _Dense(),
    "relu": _Relu(),
    "leaky_relu": _LeakyRelu(),
    "sigmoid": _Sigmoid(),
    "depth_to_space": _DepthToSpace(),
    "space_to_depth": _SpaceToDepth(),
    "residual_block": _ResidualBlock(),
    "append_noise": _AppendNoise(),
}
# Códigos estáveis do checkpoint — só acrescentar no fim.
_KIND_CODES = {kind: i for i, kind in enumerate(_LAYERS)}
_CODE_KINDS = {i: kind for kind, i in _KIND_CODES.items()}


# ── Construção ────────────────────────────────────────────────────────────────

def conv3x3(c_in, c_out):
    return LayerSpec("conv3x3", (c_in, c_out))


def dense(d_in, d_out):
    return LayerSpec("dense", (d_in, d_out))


def relu():
    return LayerSpec("relu")


def leaky_relu(alpha=0.2):
    return LayerSpec("leaky_relu", (alpha,))


def sigmoid():
    return LayerSpec("sigmoid")


def d2s(r):
    return LayerSpec("depth_to_space", (r,))


def s2d(r):
    return LayerSpec("space_to_depth", (r,))


def residual_block(filters):
    return LayerSpec("residual_block", (filters,))


def append_noise(k):
    return LayerSpec("append_noise", (k,))


def build_network(layers, seed: int = 0) -> NetworkParams:
    """Inicializa pesos uniformes em ±1/√fan_in (bias zero)."""
    rng = np.random.default_rng(seed)
    layers = tuple(layers)
    for spec in layers:
        if spec.kind not in _LAYERS:
            raise ValueError(f"camada desconhecida: {spec.kind!r}")
    return NetworkParams(layers=layers, weights=[_LAYERS[s.kind].init(s.args, rng) for s in layers])


# ── Forward / backward ───────────────────────────────────────────────────────

def net_forward(params: NetworkParams, x, noise=None, record: bool = False):
    """Roda a rede. Retorna (saída, Tape) com record=True, senão (saída, None)."""
    y = np.asarray(x, dtype=np.float64)
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
    caches = []
    for i, (spec, wts) in enumerate(zip(params.layers, params.weights)):
        y, cache = _LAYERS[spec.kind].forward(spec.args, wts, y, noise)
        if not np.all(np.isfinite(y)):
            raise NonFiniteError(f"ativação não finita na camada {i} ({spec.kind})")
        if record:
            caches.append(cache)
    return y, (Tape(caches) if record else None)


def net_backward(params: NetworkParams, tape: Tape, upstream) -> Gradients:
    """Propaga `upstream` (∂L/∂saída) de volta; consome a tape."""
    if tape is None:
        raise TapeReuseError("forward rodou sem record=True; não há tape")
    if tape.consumed:
        raise TapeReuseError("tape já consumida por um backward anterior")
    tape.consumed = True
    g = np.asarray(upstream, dtype=np.float64)
    grads: list[dict] = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        spec, wts = params.layers[i], params.weights[i]
        g, gw = _LAYERS[spec.kind].backward(spec.args, wts, tape.caches[i], g)
        grads[i] = gw
    tape.caches = []
    return Gradients(params=grads, input=g)


# ── Adam ──────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    t: int = 0
    m: list[dict[str, np.ndarray]] | None = None
    v: list[dict[str, np.ndarray]] | None = None


def adam_init(params: NetworkParams) -> AdamState:
    zeros = [{k: np.zeros_like(a) for k, a in w.items()} for w in params.weights]
    return AdamState(t=0, m=zeros, v=[{k: a.copy() for k, a in w.items()} for w in zeros])


def adam_step(params: NetworkParams, grads, state: AdamState | None, hyper: AdamHyper = AdamHyper()):
    """Um passo de Adam com correção de viés. Retorna (params', state')."""
    if isinstance(grads, Gradients):
        grads = grads.params
    if state is None or state.m is None:
        state = adam_init(params)
    for gw in grads:
        for nome, g in gw.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"gradiente não finito em {nome}")
    t = state.t + 1
    b1, b2 = hyper.beta1, hyper.beta2
    novos_w, novos_m, novos_v = [], [], []
    for wts, gw, m, v in zip(params.weights, grads, state.m, state.v):
        nw, nm, nv = {}, {}, {}
        for nome, p in wts.items():
            g = gw[nome]
            if g.shape != p.shape:
                raise FieldShapeError(f"gradiente {nome} com forma {g.shape}, esperado {p.shape}")
            nm[nome] = b1 * m[nome] + (1.0 - b1) * g
            nv[nome] = b2 * v[nome] + (1.0 - b2) * g * g
            m_hat = nm[nome] / (1.0 - b1**t)
            v_hat = nv[nome] / (1.0 - b2**t)
            nw[nome] = p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
        novos_w.append(nw)
        novos_m.append(nm)
        novos_v.append(nv)
    return NetworkParams(layers=params.layers, weights=novos_w), AdamState(t=t, m=novos_m, v=novos_v)


# ── Verificação de gradiente ─────────────────────────────────────────────────

def grad_check(
    params: NetworkParams,
    x,
    eps: float = 1e-3,
    noise=None,
    max_entries: int | None = 64,
    seed: int = 0,
) -> float:
    """Maior erro relativo entre net_backward e diferenças centrais.

    A cabeça escalar é L = Σ proj·saída com proj aleatório fixo. Checa pesos
    e entrada; com max_entries, só uma amostra determinística de cada tensor.
    O denominador tem piso em 1e-4·max|∂L/∂θ| do tensor, para que gradientes
    quase nulos não inflem a razão com ruído de arredondamento.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    out, _ = net_forward(params, x, noise)
    proj = rng.standard_normal(out.shape) / math.sqrt(out.size)

    def perda(p, xx):
        return float(np.sum(net_forward(p, xx, noise)[0] * proj))

    _, tape = net_forward(params, x, noise, record=True)
    grads = net_backward(params, tape, proj)

    def _indices(shape):
        total = int(np.prod(shape))
        if max_entries is None or total <= max_entries:
            return np.arange(total)
        return np.sort(rng.choice(total, size=max_entries, replace=False))

    def _rel(analitico, numerico, escala):
        den = max(abs(analitico), abs(numerico), 1e-4 * escala, 1e-12)
        return abs(analitico - numerico) / den

    pior = 0.0
    for li, wts in enumerate(params.weights):
        for nome, arr in wts.items():
            ga = grads.params[li][nome]
            escala = float(np.max(np.abs(ga))) if ga.size else 0.0
            for flat in _indices(arr.shape):
                idx = np.unravel_index(flat, arr.shape)
                p = params.copy()
                p.weights[li][nome][idx] += eps
                mais = perda(p, x)
                p.weights[li][nome][idx] -= 2 * eps
                menos = perda(p, x)
                pior = max(pior, _rel(ga[idx], (mais - menos) / (2 * eps), escala))

    escala = float(np.max(np.abs(grads.input)))
    for flat in _indices(x.shape):
        idx = np.unravel_index(flat, x.shape)
        xx = x.copy()
        xx[idx] += eps
        mais = perda(params, xx)
        xx[idx] -= 2 * eps
        menos = perda(params, xx)
        pior = max(pior, _rel(grads.input[idx], (mais - menos) / (2 * eps), escala))
    return pior


# ── Checkpoint ────────────────────────────────────────────────────────────────

class _Leitor:
    """Cursor sobre bytes; qualquer leitura além do fim é payload truncado."""

    def __init__(self, raw: bytes, offset: int = 0):
        self.raw, self.pos = raw, offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DatasetFormatError(
                f"truncated payload: faltam {self.pos + n - len(self.raw)} bytes"
            )
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        arr = np.frombuffer(self.take(4 * count), dtype="<u4").astype(np.int64)
        return int(arr[0]) if count == 1 else arr

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").copy()


def _u32(*vals) -> bytes:
    return np.array(vals, dtype="<u4").tobytes()


def write_network(fh, params: NetworkParams) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(_u32(CHECKPOINT_VERSION, len(params.layers)))
    for spec, wts in zip(params.layers, params.weights):
        fh.write(_u32(_KIND_CODES[spec.kind], len(spec.args)))
        fh.write(np.asarray(spec.args, dtype="<f8").tobytes())
        fh.write(_u32(len(wts)))
        for nome in sorted(wts):
            arr = wts[nome]
            nb = nome.encode("ascii")
            fh.write(_u32(len(nb)))
            fh.write(nb)
            fh.write(_u32(arr.ndim, *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_network(leitor: _Leitor) -> NetworkParams:
    magic = leitor.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise DatasetFormatError(f"bad magic: {magic!r} (esperado {CHECKPOINT_MAGIC!r})")
    version, n_layers = leitor.u32(2)
    if version != CHECKPOINT_VERSION:
        raise DatasetFormatError(f"versão de checkpoint não suportada: {version}")
    layers, weights = [], []
    for _ in range(n_layers):
        code, n_args = leitor.u32(2)
        if code not in _CODE_KINDS:
            raise DatasetFormatError(f"código de camada desconhecido: {code}")
        kind = _CODE_KINDS[code]
        args = leitor.f64(n_args)
        # alpha do leaky_relu é real; o resto dos argumentos é inteiro.
        args = tuple(float(a) if kind == "leaky_relu" else int(a) for a in args)
        wts = {}
        for _ in range(leitor.u32()):
            nome = leitor.take(leitor.u32()).decode("ascii")
            ndim = leitor.u32()
            shape = tuple(int(s) for s in np.atleast_1d(leitor.u32(ndim))) if ndim else ()
            if int(np.prod(shape, dtype=np.int64)) > 2**31:
                raise DatasetFormatError(f"dimension overflow: tensor {nome} {shape}")
            wts[nome] = leitor.f64(int(np.prod(shape))).reshape(shape)
        layers.append(LayerSpec(kind, args))
        weights.append(wts)
    return NetworkParams(layers=tuple(layers), weights=weights)


def save_network(params: NetworkParams, path) -> None:
    with open(path, "wb") as fh:
        write_network(fh, params)


def load_network(path) -> NetworkParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    params, fim = network_from_bytes(raw)
    if fim != len(raw):
        raise DatasetFormatError(f"{len(raw) - fim} bytes sobrando depois da rede em {path}")
    return params


def network_bytes(params: NetworkParams) -> bytes:
    buf = io.BytesIO()
    write_network(buf, params)
    return buf.getvalue()


def network_from_bytes(raw: bytes, offset: int = 0) -> tuple[NetworkParams, int]:
    """Lê um CGN1 embutido a partir de `offset`; devolve (rede, próximo offset)."""
    leitor = _Leitor(raw, offset)
    return read_network(leitor), leitor.pos
