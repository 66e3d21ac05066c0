"""Instance- and cluster-level projection heads and contrastive losses.

Both losses are InfoNCE over cosine similarities. The instance loss
contrasts the 2B projected samples row-wise; the cluster loss contrasts
the 2k assignment columns, plus a balance penalty that is zero exactly
when the mean assignment is uniform. The default denominator includes
the positive term; ``include_positive=False`` gives the variant whose
denominator holds only the 2B-2 negatives. ``rowwise=True`` switches the
cluster loss to contrast sample rows instead of cluster columns.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError
from .rng import stream, truncated_normal

COS_EPS = 1e-12
_NORM_EPS = 1e-24  # inside sqrt, keeps the norm differentiable at zero


class NumericWarning(UserWarning):
    pass


class ProjectorParams:
    """Two-layer MLP E -> E -> out with ReLU between."""

    def __init__(self, embed, out, seed, tag, dtype=np.float32):
        if out < 2:
            raise ContractError(f"projector output dim must be >= 2, got {out}")
        self.w1 = ad.parameter(
            truncated_normal(stream(seed, tag, "w1"), (embed, embed), dtype=dtype),
            name=f"{tag}.w1")
        self.b1 = ad.parameter(np.zeros(embed, dtype=dtype), name=f"{tag}.b1")
        self.w2 = ad.parameter(
            truncated_normal(stream(seed, tag, "w2"), (embed, out), dtype=dtype),
            name=f"{tag}.w2")
        self.b2 = ad.parameter(np.zeros(out, dtype=dtype), name=f"{tag}.b2")

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


def instance_projection(h, p):
    """h [B,E] -> z [B,d_I]."""
    return ad.linear(ad.relu(ad.linear(h, p.w1, p.b1)), p.w2, p.b2)


def cluster_assignment(h, p):
    """h [B,E] -> row-stochastic c [B,k]."""
    return ad.softmax(ad.linear(ad.relu(ad.linear(h, p.w1, p.b1)), p.w2, p.b2),
                      axis=1)


def cosine_sim(u, v):
    """Plain float cosine of two vectors with an epsilon-guarded denominator."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    nu = math.sqrt(float(u @ u))
    nv = math.sqrt(float(v @ v))
    if nu == 0.0 or nv == 0.0:
        warnings.warn("cosine of a zero vector, returning 0", NumericWarning)
        return 0.0
    return float(u @ v) / (nu * nv + COS_EPS)


def _cosine_matrix(z):
    """All pairwise cosines of the rows of z: [m,d] -> [m,m]."""
    norms = ad.sqrt(ad.add(ad.tsum(ad.mul(z, z), axis=1), _NORM_EPS))
    m = z.shape[0]
    outer = ad.matmul(ad.reshape(norms, (m, 1)), ad.reshape(norms, (1, m)))
    return ad.div(ad.matmul(z, ad.transpose(z, (1, 0))), ad.add(outer, COS_EPS))


def _nt_xent_oneside(xa, xb, tau, include_positive):
    """Mean InfoNCE over anchors = rows of xa, positives = matching rows of
    xb, negatives = all other rows of the stacked pool."""
    m = xa.shape[0]
    sims = _cosine_matrix(ad.concat([xa, xb], axis=0))
    logits = ad.mul(ad.narrow(sims, 0, 0, m), 1.0 / tau)      # [m, 2m]
    pos_mask = np.zeros((m, 2 * m), dtype=logits.dtype)
    pos_mask[np.arange(m), m + np.arange(m)] = 1.0
    den_mask = np.ones((m, 2 * m), dtype=logits.dtype)
    den_mask[np.arange(m), np.arange(m)] = 0.0                # never self
    if not include_positive:
        den_mask[np.arange(m), m + np.arange(m)] = 0.0
    pos = ad.tsum(ad.mul(logits, ad.constant(pos_mask)), axis=1)
    den = ad.tsum(ad.mul(ad.exp(logits), ad.constant(den_mask)), axis=1)
    return ad.tmean(ad.sub(ad.log(den), pos))


def instance_loss(za, zb, tau, include_positive=True):
    """One direction of the instance loss: anchors in za, positives in zb."""
    if za.shape[0] < 2:
        raise ContractError(
            f"instance loss needs B >= 2, got B = {za.shape[0]}")
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    return _nt_xent_oneside(za, zb, tau, include_positive)


def _check_stochastic(c, name):
    sums = c.data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-4) or np.any(c.data < -1e-7):
        raise ContractError(f"{name} rows are not stochastic")


def balance_penalty(ca, cb):
    """[log k - H(mean ca)] + [log k - H(mean cb)]; zero iff both mean
    assignments are uniform."""
    k = ca.shape[1]
    out = None
    for c in (ca, cb):
        p = ad.tmean(c, axis=0)
        ent = ad.neg(ad.tsum(ad.mul(p, ad.log(ad.add(p, 1e-12)))))
        term = ad.sub(math.log(k), ent)
        out = term if out is None else ad.add(out, term)
    return out


def cluster_loss(ca, cb, tau, include_positive=True, rowwise=False,
                 penalty_weight=1.0):
    """Symmetrized cluster contrast plus the balance penalty."""
    if ca.shape[1] < 2:
        raise ContractError(f"need k >= 2 clusters, got {ca.shape[1]}")
    if ca.shape[0] < 2:
        raise ContractError(f"cluster loss needs B >= 2, got {ca.shape[0]}")
    _check_stochastic(ca, "view-a assignments")
    _check_stochastic(cb, "view-b assignments")
    if rowwise:
        xa, xb = ca, cb
    else:
        xa = ad.transpose(ca, (1, 0))
        xb = ad.transpose(cb, (1, 0))
    contrast = ad.add(_nt_xent_oneside(xa, xb, tau, include_positive),
                      _nt_xent_oneside(xb, xa, tau, include_positive))
    return ad.add(contrast, ad.mul(balance_penalty(ca, cb),
                                   float(penalty_weight)))


def predict_clusters(c):
    """Argmax per row; ties resolve to the lowest cluster index."""
    probs = c.data if isinstance(c, ad.Tensor) else np.asarray(c)
    return np.argmax(probs, axis=1).astype(np.int64)


@dataclass
class LossReport:
    li_a: float
    li_b: float
    lc_a: float
    lc_b: float
    penalty: float
    total: object            # scalar Tensor, differentiable
    tau_i: float
    tau_c: float
    usage: object = None     # np [k], argmax share per cluster, both views

    def components(self):
        return {"li_a": self.li_a, "li_b": self.li_b,
                "lc_a": self.lc_a, "lc_b": self.lc_b,
                "penalty": self.penalty, "total": self.total.item()}


def total_loss(ha, hb, inst_params, clus_params, tau_i, tau_c,
               include_positive=True, rowwise_cluster=False,
               penalty_weight=1.0):
    """L = L_I^a + L_I^b + L_C^a + L_C^b + penalty, all parts reported."""
    za = instance_projection(ha, inst_params)
    zb = instance_projection(hb, inst_params)
    ca = cluster_assignment(ha, clus_params)
    cb = cluster_assignment(hb, clus_params)
    li_a = instance_loss(za, zb, tau_i, include_positive)
    li_b = instance_loss(zb, za, tau_i, include_positive)
    if rowwise_cluster:
        xa, xb = ca, cb
    else:
        xa = ad.transpose(ca, (1, 0))
        xb = ad.transpose(cb, (1, 0))
    _check_stochastic(ca, "view-a assignments")
    _check_stochastic(cb, "view-b assignments")
    lc_a = _nt_xent_oneside(xa, xb, tau_c, include_positive)
    lc_b = _nt_xent_oneside(xb, xa, tau_c, include_positive)
    pen = ad.mul(balance_penalty(ca, cb), float(penalty_weight))
    total = ad.add(ad.add(ad.add(li_a, li_b), ad.add(lc_a, lc_b)), pen)
    k = ca.shape[1]
    wins = (np.bincount(np.argmax(ca.data, axis=1), minlength=k)
            + np.bincount(np.argmax(cb.data, axis=1), minlength=k))
    return LossReport(li_a.item(), li_b.item(), lc_a.item(), lc_b.item(),
                      pen.item(), total, tau_i, tau_c,
                      wins / (2.0 * ca.shape[0]))
