"""Independent reference implementations used to freeze expected test values.

Everything here is deliberately written as scalar loops over numpy float64
(or plain python floats), independent of the tensor code paths under test.
"""

from __future__ import annotations

import collections
import math

import numpy as np


# ---------------------------------------------------------------------------
# linear algebra primitives
# ---------------------------------------------------------------------------

def affine_rows(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    """Row-wise affine map with torch Linear convention: weight is [out, in]."""
    n, d_in = x.shape
    d_out = weight.shape[0]
    y = np.zeros((n, d_out))
    for i in range(n):
        for o in range(d_out):
            acc = 0.0 if bias is None else float(bias[o])
            for k in range(d_in):
                acc += float(x[i, k]) * float(weight[o, k])
            y[i, o] = acc
    return y


def softmax_vec(logits: np.ndarray) -> np.ndarray:
    m = max(float(v) for v in logits)
    exps = np.array([math.exp(float(v) - m) for v in logits])
    return exps / exps.sum()


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, p = a.shape[0], b.shape[0]
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            num = sum(float(a[i, k]) * float(b[j, k]) for k in range(a.shape[1]))
            na = math.sqrt(sum(float(a[i, k]) ** 2 for k in range(a.shape[1])))
            nb = math.sqrt(sum(float(b[j, k]) ** 2 for k in range(b.shape[1])))
            out[i, j] = num / (na * nb)
    return out


# ---------------------------------------------------------------------------
# normalization layers
# ---------------------------------------------------------------------------

def batchnorm_rows(x: np.ndarray,
                   weight: np.ndarray,
                   bias: np.ndarray,
                   running_mean: np.ndarray,
                   running_var: np.ndarray,
                   eps: float,
                   training: bool) -> np.ndarray:
    """BatchNorm over rows; training mode uses biased batch statistics."""
    n, d = x.shape
    y = np.zeros_like(x, dtype=np.float64)
    for j in range(d):
        if training and n > 1:
            mean = sum(float(x[i, j]) for i in range(n)) / n
            var = sum((float(x[i, j]) - mean) ** 2 for i in range(n)) / n
        else:
            mean, var = float(running_mean[j]), float(running_var[j])
        for i in range(n):
            norm = (float(x[i, j]) - mean) / math.sqrt(var + eps)
            y[i, j] = norm * float(weight[j]) + float(bias[j])
    return y


def layernorm_rows(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                   eps: float) -> np.ndarray:
    n, d = x.shape
    y = np.zeros_like(x, dtype=np.float64)
    for i in range(n):
        mean = sum(float(v) for v in x[i]) / d
        var = sum((float(v) - mean) ** 2 for v in x[i]) / d
        for j in range(d):
            y[i, j] = (float(x[i, j]) - mean) / math.sqrt(var + eps) \
                * float(weight[j]) + float(bias[j])
    return y


def gelu(v: float) -> float:
    return v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# image-branch pipeline
# ---------------------------------------------------------------------------

def tanh_batchnorm(x: np.ndarray, bn_params: dict, training: bool) -> np.ndarray:
    """Tanh then batch normalization over all leading axes."""
    shape = x.shape
    flat = np.tanh(np.asarray(x, dtype=np.float64)).reshape(-1, shape[-1])
    out = batchnorm_rows(flat, bn_params["weight"], bn_params["bias"],
                         bn_params["running_mean"], bn_params["running_var"],
                         bn_params["eps"], training)
    return out.reshape(shape)


def sge_global(regions: np.ndarray, params: dict, training: bool) -> np.ndarray:
    """Scalar re-implementation of the self-guided global vector.

    regions: [B, K, d]. params carries region_map/global_map (weight, bias),
    region_bn/global_bn stats, and the score weight [1, d].
    """
    b, k, d = regions.shape
    v_ave = np.zeros((b, d))
    for bi in range(b):
        for j in range(d):
            v_ave[bi, j] = sum(float(regions[bi, i, j]) for i in range(k)) / k

    mapped_regions = np.zeros((b, k, d))
    for bi in range(b):
        mapped_regions[bi] = affine_rows(regions[bi],
                                         params["region_map"]["weight"],
                                         params["region_map"]["bias"])
    mapped_global = affine_rows(v_ave, params["global_map"]["weight"],
                                params["global_map"]["bias"])

    tb_regions = tanh_batchnorm(mapped_regions, params["region_bn"], training)
    tb_global = tanh_batchnorm(mapped_global, params["global_bn"], training)

    out = np.zeros((b, d))
    weights = np.zeros((b, k))
    for bi in range(b):
        logits = np.zeros(k)
        for i in range(k):
            r = tb_global[bi] * tb_regions[bi, i]
            logits[i] = sum(float(params["score_weight"][0, j]) * float(r[j])
                            for j in range(d))
        s = softmax_vec(logits)
        weights[bi] = s
        pooled = np.zeros(d)
        for i in range(k):
            for j in range(d):
                pooled[j] += s[i] * float(regions[bi, i, j])
        norm = math.sqrt(sum(float(v) ** 2 for v in pooled))
        out[bi] = pooled / norm
    return out, weights


def cge_global(clip_feat: np.ndarray, params: dict, training: bool) -> np.ndarray:
    """Scalar re-implementation of the clip-guided global vector."""
    h = batchnorm_rows(clip_feat, params["bn_in"]["weight"], params["bn_in"]["bias"],
                       params["bn_in"]["running_mean"], params["bn_in"]["running_var"],
                       params["bn_in"]["eps"], training)
    h = affine_rows(h, params["fc1"]["weight"], params["fc1"]["bias"])
    h = np.vectorize(gelu)(h)
    h = batchnorm_rows(h, params["bn_mid"]["weight"], params["bn_mid"]["bias"],
                       params["bn_mid"]["running_mean"], params["bn_mid"]["running_var"],
                       params["bn_mid"]["eps"], training)
    return affine_rows(h, params["fc2"]["weight"], params["fc2"]["bias"])


def enhance_regions(regions: np.ndarray, v_glo: np.ndarray) -> np.ndarray:
    b, k, d = regions.shape
    out = np.zeros_like(regions, dtype=np.float64)
    for bi in range(b):
        logits = np.array([
            sum(float(v_glo[bi, j]) * float(regions[bi, i, j]) for j in range(d))
            for i in range(k)])
        a = softmax_vec(logits)
        for i in range(k):
            out[bi, i] = regions[bi, i] + a[i] * v_glo[bi]
    return out


# ---------------------------------------------------------------------------
# pooling pipeline
# ---------------------------------------------------------------------------

def positional_encoding(n: int, dim: int) -> np.ndarray:
    table = np.zeros((n, dim))
    for t in range(n):
        for i in range(dim):
            j = i // 2
            w = 1.0 / (10000.0 ** (2.0 * j / dim))
            table[t, i] = math.sin(w * t) if i % 2 == 0 else math.cos(w * t)
    return table


def _sigmoid(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v))


def gru_direction(x_seq: np.ndarray, w_ih: np.ndarray, w_hh: np.ndarray,
                  b_ih: np.ndarray, b_hh: np.ndarray) -> np.ndarray:
    """Single-direction GRU over [T, in]; returns hidden states [T, h].

    Gate layout in the stacked weights follows torch: reset, update, new.
    """
    t_len = x_seq.shape[0]
    h_size = w_hh.shape[1]
    h = np.zeros(h_size)
    out = np.zeros((t_len, h_size))
    for t in range(t_len):
        gi = affine_rows(x_seq[t:t + 1], w_ih, b_ih)[0]
        gh = affine_rows(h[None, :], w_hh, b_hh)[0]
        r = np.array([_sigmoid(gi[j] + gh[j]) for j in range(h_size)])
        z = np.array([_sigmoid(gi[h_size + j] + gh[h_size + j]) for j in range(h_size)])
        n = np.array([math.tanh(gi[2 * h_size + j] + r[j] * gh[2 * h_size + j])
                      for j in range(h_size)])
        h = (1.0 - z) * n + z * h
        out[t] = h
    return out


def bigru(x_seq: np.ndarray, params: dict) -> np.ndarray:
    """Bidirectional GRU outputs [T, 2h] from torch-style parameter dict."""
    fwd = gru_direction(x_seq, params["weight_ih_l0"], params["weight_hh_l0"],
                        params["bias_ih_l0"], params["bias_hh_l0"])
    bwd = gru_direction(x_seq[::-1], params["weight_ih_l0_reverse"],
                        params["weight_hh_l0_reverse"],
                        params["bias_ih_l0_reverse"], params["bias_hh_l0_reverse"])
    return np.concatenate([fwd, bwd[::-1]], axis=1)


def pooling_coefficients(n: int, gru_params: dict, mlp_params: list) -> np.ndarray:
    """Coefficients for one sequence length via the scalar recurrent pass.

    mlp_params: [(w1, b1), (w2, b2)] with a ReLU in between.
    """
    d_t = gru_params["weight_ih_l0"].shape[1]
    codes = positional_encoding(n, d_t)
    hidden = bigru(codes, gru_params)
    (w1, b1), (w2, b2) = mlp_params
    h1 = np.maximum(affine_rows(hidden, w1, b1), 0.0)
    logits = affine_rows(h1, w2, b2)[:, 0]
    return softmax_vec(logits)


def sort_aggregate(features: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Per-dimension stable descending sort, then theta-weighted sum."""
    n, d = features.shape
    out = np.zeros(d)
    for j in range(d):
        column = [(float(features[t, j]), t) for t in range(n)]
        column.sort(key=lambda pair: -pair[0])  # python sort is stable
        for rank, (value, _) in enumerate(column):
            out[j] += float(theta[rank]) * value
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mini_hal(v: np.ndarray, w: np.ndarray, gamma: float, eps: float) -> float:
    b = v.shape[0]
    sims = cosine_matrix(v, w)
    total = 0.0
    for i in range(b):
        col = sum(math.exp(gamma * (sims[m, i] - eps)) for m in range(b) if m != i)
        row = sum(math.exp(gamma * (sims[i, n] - eps)) for n in range(b) if n != i)
        total += (math.log(1.0 + col) / gamma
                  + math.log(1.0 + row) / gamma
                  - math.log(1.0 + sims[i, i]))
    return total / b


def visual_queue_hal(v_key: np.ndarray, w_query: np.ndarray, queue: np.ndarray,
            gamma: float, eps: float) -> float:
    b = v_key.shape[0]
    pos = cosine_matrix(v_key, w_query)
    total = 0.0
    for i in range(b):
        neg = 0.0
        if queue.shape[0]:
            sims = cosine_matrix(queue, w_query[i:i + 1])[:, 0]
            neg = sum(math.exp(gamma * (s - eps)) for s in sims)
        total += math.log(1.0 + neg) / gamma - math.log(1.0 + pos[i, i])
    return total / b


def text_queue_hal(v_query: np.ndarray, w_key: np.ndarray, queue: np.ndarray,
            gamma: float, eps: float) -> float:
    b = v_query.shape[0]
    pos = cosine_matrix(v_query, w_key)
    total = 0.0
    for i in range(b):
        neg = 0.0
        if queue.shape[0]:
            sims = cosine_matrix(v_query[i:i + 1], queue)[0]
            neg = sum(math.exp(gamma * (s - eps)) for s in sims)
        total += math.log(1.0 + neg) / gamma - math.log(1.0 + pos[i, i])
    return total / b


# ---------------------------------------------------------------------------
# queue and ranking references
# ---------------------------------------------------------------------------

class RingBufferReference:
    """FIFO of fixed capacity built on deque; oldest entries evicted first."""

    def __init__(self, capacity: int):
        self.entries: collections.deque = collections.deque(maxlen=capacity)

    def push(self, rows: np.ndarray) -> None:
        for row in rows:
            self.entries.append(np.array(row))

    def contents(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 0))
        return np.stack(list(self.entries))


def recall_by_full_sort(sim: np.ndarray, image_to_captions, k: int
                        ) -> tuple[float, float]:
    """Brute-force recall via explicit full sort with lower-index tie-break."""
    n_img, n_cap = sim.shape
    source = {}
    for i, caps in enumerate(image_to_captions):
        for c in caps:
            source[c] = i

    cap_hits = 0
    for i in range(n_img):
        order = sorted(range(n_cap), key=lambda j: (-sim[i, j], j))
        top = set(order[:k])
        if any(c in top for c in image_to_captions[i]):
            cap_hits += 1

    img_hits = 0
    for j in range(n_cap):
        order = sorted(range(n_img), key=lambda i: (-sim[i, j], i))
        if source[j] in order[:k]:
            img_hits += 1
    return 100.0 * cap_hits / n_img, 100.0 * img_hits / n_cap


# ---------------------------------------------------------------------------
# numerical differentiation
# ---------------------------------------------------------------------------

def central_difference_grad(fn, x, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of one tensor."""
    import torch

    def evaluate(value) -> float:
        out = fn(value)
        return float(out.detach()) if hasattr(out, "detach") else float(out)

    x = x.detach().clone()
    grad = np.zeros(x.numel())
    flat = x.view(-1)
    for idx in range(flat.numel()):
        orig = float(flat[idx])
        flat[idx] = orig + h
        f_plus = evaluate(x)
        flat[idx] = orig - h
        f_minus = evaluate(x)
        flat[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(tuple(x.shape))


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Infinity-norm error relative to max(1, ||numeric||_inf)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(1.0, float(np.abs(numeric).max()) if numeric.size else 1.0)
    diff = float(np.abs(analytic - numeric).max()) if numeric.size else 0.0
    return diff / scale
