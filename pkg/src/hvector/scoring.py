"""Identification accuracy, verification EER, and an LDA/PLDA back-end."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.linalg

__all__ = [
    "EmbeddingRecord", "Trial", "PldaModel",
    "accuracy", "compute_eer", "eer_operating_point",
    "make_trials", "plda_fit", "plda_score", "score_trials", "cosine_score",
    "save_embeddings", "load_embeddings", "save_trials", "load_trials",
    "save_eer_report",
]


@dataclass
class EmbeddingRecord:
    utterance_id: str
    speaker_id: str
    vector: np.ndarray


@dataclass
class Trial:
    enrol_speaker: str
    test_utterance: str
    enrol_vector: np.ndarray
    test_vector: np.ndarray
    target: bool


def accuracy(preds, truth) -> float:
    """Exact-match fraction between two equal-length label sequences."""
    preds = list(preds)
    truth = list(truth)
    if not preds or len(preds) != len(truth):
        raise ValueError(f"need equal non-empty label lists, "
                         f"got {len(preds)} and {len(truth)}")
    return sum(p == t for p, t in zip(preds, truth)) / len(preds)


# --- equal error rate ----------------------------------------------------
#
# Operating points sweep a threshold over the distinct scores (accept iff
# score >= threshold): FAR = P(accept | non-target), FRR = P(reject | target).
# With finite trial counts the two step functions rarely meet, so the EER is
# read off the convex hull of the operating points in (FAR, FRR) space: the
# hull edges are exactly the linear interpolations between achievable points,
# and the EER is where the hull crosses FAR == FRR.
#
# The error rates are exact rationals (error counts over class sizes), so the
# hull orientation tests and the diagonal crossing are done with Fraction
# arithmetic and rounded to float once at the end. Any other exact procedure
# over the same operating points (e.g. a brute-force sweep over all point
# pairs) lands on the same rational and therefore on the identical float.

def _operating_points(scores, targets):
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=bool)
    if scores.ndim != 1 or scores.shape != targets.shape:
        raise ValueError("scores and targets must be matching 1-D sequences")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_t = int(targets.sum())
    n_n = len(targets) - n_t
    if n_t == 0 or n_n == 0:
        raise ValueError("EER needs at least one target and one non-target trial")
    t_scores = np.sort(scores[targets])
    n_scores = np.sort(scores[~targets])
    points = [(Fraction(1), Fraction(0), -np.inf)]  # accept everything
    for th in np.unique(scores):
        far = Fraction(int(n_n - np.searchsorted(n_scores, th, side="left")), n_n)
        frr = Fraction(int(np.searchsorted(t_scores, th, side="left")), n_t)
        points.append((far, frr, float(th)))
    points.append((Fraction(0), Fraction(1), np.inf))  # reject everything
    return points


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _lower_hull(points):
    """Lower-left convex hull over (FAR, FRR) operating points."""
    pts = sorted(points, key=lambda p: (p[0], p[1]))
    hull = []
    for p in pts:
        while len(hull) >= 2 and _cross(hull[-2], hull[-1], p) <= 0:
            hull.pop()
        hull.append(p)
    return hull


def _diagonal_crossing(a, b) -> Fraction:
    """Where the segment a-b meets FAR == FRR; points are (far, frr, thr)."""
    da = a[0] - a[1]
    db = b[0] - b[1]
    if da == 0:
        return a[0]
    if db == 0:
        return b[0]
    t = da / (da - db)
    return a[0] + t * (b[0] - a[0])


def compute_eer(scores, targets) -> float:
    """Equal error rate of a verification score set.

    The hull walk always finds a sign change: the sweep starts at
    (FAR, FRR) = (1, 0) and ends at (0, 1).
    """
    hull = _lower_hull(_operating_points(scores, targets))
    for a, b in zip(hull, hull[1:]):
        if (a[0] - a[1]) <= 0 <= (b[0] - b[1]) or \
           (b[0] - b[1]) <= 0 <= (a[0] - a[1]):
            return float(_diagonal_crossing(a, b))
    raise AssertionError("operating points never crossed the diagonal")


def eer_operating_point(scores, targets) -> tuple[float, float]:
    """(EER, threshold) where the threshold is the swept operating point
    closest to equal error (ties resolved toward the lower threshold)."""
    points = _operating_points(scores, targets)
    eer = compute_eer(scores, targets)
    finite = [p for p in points if np.isfinite(p[2])]
    best = min(finite, key=lambda p: (abs(p[0] - p[1]), p[2]))
    return eer, best[2]


# --- verification trials --------------------------------------------------

def _unit(v):
    n = np.linalg.norm(v)
    if n == 0.0:
        return v
    return v / n


def make_trials(enrol, eval_records, length_norm: bool = False) -> list[Trial]:
    """Cartesian trials: every enrolment speaker against every eval utterance.

    The enrolment model for a speaker is the mean of that speaker's
    embeddings (optionally length-normalized first); a trial is a target
    iff the eval utterance belongs to the enrolment speaker.
    """
    if not enrol or not eval_records:
        raise ValueError("enrolment and evaluation sets must both be non-empty")
    by_speaker: dict[str, list[np.ndarray]] = {}
    for r in enrol:
        v = _unit(r.vector) if length_norm else r.vector
        by_speaker.setdefault(r.speaker_id, []).append(np.asarray(v, dtype=np.float64))
    models = {spk: np.mean(vs, axis=0) for spk, vs in sorted(by_speaker.items())}
    trials = []
    for spk, model_vec in models.items():
        for r in eval_records:
            v = _unit(r.vector) if length_norm else r.vector
            trials.append(Trial(
                enrol_speaker=spk,
                test_utterance=r.utterance_id,
                enrol_vector=model_vec,
                test_vector=np.asarray(v, dtype=np.float64),
                target=(r.speaker_id == spk),
            ))
    return trials


def cosine_score(e, t) -> float:
    return float(np.dot(_unit(np.asarray(e, dtype=np.float64)),
                        _unit(np.asarray(t, dtype=np.float64))))


# --- LDA + two-covariance PLDA ---------------------------------------------

@dataclass
class PldaModel:
    mean: np.ndarray      # global mean in the raw embedding space
    lda: np.ndarray       # projection matrix, raw dim x reduced dim
    mu: np.ndarray        # speaker-factor mean in the projected space
    phi_b: np.ndarray     # between-speaker covariance
    phi_w: np.ndarray     # within-speaker covariance

    def project(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.shape[0]:
            raise ValueError(f"vector has dim {x.shape[-1]}, "
                             f"model expects {self.mean.shape[0]}")
        return (x - self.mean) @ self.lda


def _group_by_speaker(embeddings):
    groups: dict[str, list[np.ndarray]] = {}
    for r in embeddings:
        groups.setdefault(r.speaker_id, []).append(np.asarray(r.vector, np.float64))
    return {k: np.stack(v) for k, v in sorted(groups.items())}


def _scatter_matrices(groups, dim):
    """Biased within/between scatter of globally centred data."""
    n = sum(len(g) for g in groups.values())
    sw = np.zeros((dim, dim))
    sb = np.zeros((dim, dim))
    for g in groups.values():
        m = g.mean(axis=0)
        c = g - m
        sw += c.T @ c
        sb += len(g) * np.outer(m, m)
    return sw / n, sb / n


def _lda_projection(groups, dim, reduced_dim):
    sw, sb = _scatter_matrices(groups, dim)
    try:
        evals, evecs = scipy.linalg.eigh(sb, sw)
    except scipy.linalg.LinAlgError:
        warnings.warn("within-class scatter is singular; regularizing with 1e-6*I")
        try:
            evals, evecs = scipy.linalg.eigh(sb, sw + 1e-6 * np.eye(dim))
        except scipy.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                "within-class scatter is singular even after regularization"
            ) from exc
    order = np.argsort(evals)[::-1][:reduced_dim]
    w = evecs[:, order]
    # deterministic sign: largest-magnitude component of each column positive
    flips = np.sign(w[np.argmax(np.abs(w), axis=0), np.arange(w.shape[1])])
    flips[flips == 0.0] = 1.0
    return w * flips


def _marginal_log_likelihood(stats, mu, phi_b, phi_w):
    """Exact marginal log-likelihood of the two-covariance model.

    Decomposing each speaker's observations into the mean and within-speaker
    contrasts makes the likelihood a product of small Gaussians: the n-1
    contrast directions see covariance phi_w, the mean direction sees
    phi_b + phi_w / n.
    """
    d = mu.shape[0]
    _, logdet_w = np.linalg.slogdet(phi_w)
    w_inv = np.linalg.inv(phi_w)
    total = 0.0
    for count, mean_vec, scatter in stats:
        m = phi_b * count + phi_w
        _, logdet_m = np.linalg.slogdet(m)
        diff = mean_vec - mu
        quad = count * diff @ np.linalg.solve(m, diff)
        total += (
            -0.5 * count * d * np.log(2.0 * np.pi)
            - 0.5 * (count - 1) * logdet_w
            - 0.5 * logdet_m
            - 0.5 * np.sum(w_inv * scatter)
            - 0.5 * quad
        )
    return total


def plda_fit(embeddings, reduced_dim: int | None = None, use_lda: bool = True,
             max_iter: int = 50, tol: float = 1e-6) -> PldaModel:
    """Center, optionally LDA-project, then EM-fit the two-covariance model.

    The generative model: speaker factor y ~ N(mu, phi_b); each observation
    x = y + e with e ~ N(0, phi_w). EM stops after max_iter iterations or
    when the exact marginal log-likelihood improves by less than tol.
    """
    vectors = np.stack([np.asarray(r.vector, dtype=np.float64) for r in embeddings])
    if not np.all(np.isfinite(vectors)):
        raise ValueError("embeddings must be finite")
    dim = vectors.shape[1]
    speakers = {r.speaker_id for r in embeddings}
    if len(speakers) < 2:
        raise ValueError("PLDA needs at least 2 speakers")
    mean = vectors.mean(axis=0)
    centred = [EmbeddingRecord(r.utterance_id, r.speaker_id,
                               np.asarray(r.vector, np.float64) - mean)
               for r in embeddings]
    groups = _group_by_speaker(centred)
    if max(len(g) for g in groups.values()) < 2:
        raise ValueError("PLDA needs repeated utterances for at least one speaker")

    if use_lda:
        if reduced_dim is None:
            reduced_dim = min(len(speakers) - 1, 300, dim)
        if not 1 <= reduced_dim <= dim:
            raise ValueError(f"reduced_dim must be in [1, {dim}], got {reduced_dim}")
        if reduced_dim > len(speakers) - 1:
            raise ValueError(
                f"LDA rank caps at n_speakers-1 = {len(speakers) - 1}, "
                f"got reduced_dim {reduced_dim}"
            )
        lda = _lda_projection(groups, dim, reduced_dim)
    else:
        lda = np.eye(dim)

    projected = {spk: g @ lda for spk, g in groups.items()}
    # sufficient statistics per speaker: count, mean, within scatter
    stats = []
    for g in projected.values():
        m = g.mean(axis=0)
        c = g - m
        stats.append((len(g), m, c.T @ c))

    d = lda.shape[1]
    n_total = sum(count for count, _, _ in stats)
    mu = sum(count * m for count, m, _ in stats) / n_total
    phi_w = sum(s for _, _, s in stats) / n_total + 1e-6 * np.eye(d)
    phi_b = sum(count * np.outer(m - mu, m - mu) for count, m, _ in stats) \
        / n_total + 1e-6 * np.eye(d)

    ll_prev = -np.inf
    for _ in range(max_iter):
        ll = _marginal_log_likelihood(stats, mu, phi_b, phi_w)
        if ll - ll_prev < tol:
            break
        ll_prev = ll
        # E-step: Gaussian posterior of each speaker factor, in a form that
        # tolerates phi_b approaching zero
        post = []
        for count, m, _ in stats:
            g = np.linalg.solve(phi_b + phi_w / count, np.eye(d))
            gain = phi_b @ g
            post_mean = mu + gain @ (m - mu)
            post_cov = phi_b - gain @ phi_b
            post.append((post_mean, post_cov))
        # M-step
        k = len(stats)
        mu = sum(pm for pm, _ in post) / k
        phi_b = sum(pc + np.outer(pm - mu, pm - mu) for pm, pc in post) / k
        phi_w_new = np.zeros((d, d))
        for (count, m, scatter), (pm, pc) in zip(stats, post):
            diff = m - pm
            phi_w_new += scatter + count * (np.outer(diff, diff) + pc)
        phi_w = phi_w_new / n_total
        # keep both covariances symmetric against accumulated round-off
        phi_b = 0.5 * (phi_b + phi_b.T)
        phi_w = 0.5 * (phi_w + phi_w.T)
        # identical repeats per speaker drive the within covariance to zero;
        # ridge it only then, so healthy fits stay reparameterization-exact
        evals = np.linalg.eigvalsh(phi_w)
        if evals[0] <= 1e-12 * max(evals[-1], 1.0):
            warnings.warn("within-speaker covariance is near-singular; "
                          "regularizing with 1e-6*I")
            phi_w = phi_w + 1e-6 * np.eye(d)

    return PldaModel(mean=mean, lda=lda, mu=mu, phi_b=phi_b, phi_w=phi_w)


def _llr_terms(model):
    b, w = model.phi_b, model.phi_w
    t = b + w
    s_plus = w + 2.0 * b
    return t, s_plus, w


def score_trials(model: PldaModel, trials) -> np.ndarray:
    """Log-likelihood ratios, same speaker vs different, for each trial."""
    if not trials:
        return np.zeros(0)
    e = model.project(np.stack([tr.enrol_vector for tr in trials])) - model.mu
    t = model.project(np.stack([tr.test_vector for tr in trials])) - model.mu
    cov_t, cov_plus, cov_minus = _llr_terms(model)
    u = (e + t) / np.sqrt(2.0)
    v = (e - t) / np.sqrt(2.0)

    def quad(cov, x):
        return np.sum(x * np.linalg.solve(cov, x.T).T, axis=1)

    _, ld_t = np.linalg.slogdet(cov_t)
    _, ld_plus = np.linalg.slogdet(cov_plus)
    _, ld_minus = np.linalg.slogdet(cov_minus)
    llr = (
        ld_t - 0.5 * (ld_plus + ld_minus)
        - 0.5 * (quad(cov_plus, u) + quad(cov_minus, v))
        + 0.5 * (quad(cov_t, u) + quad(cov_t, v))
    )
    return llr


def plda_score(model: PldaModel, enrol, test) -> float:
    """Closed-form same-speaker log-likelihood ratio for one pair."""
    enrol = np.asarray(enrol, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if enrol.shape != test.shape:
        raise ValueError(f"vector dims differ: {enrol.shape} vs {test.shape}")
    trial = Trial("", "", enrol, test, target=False)
    return float(score_trials(model, [trial])[0])


# --- file formats ----------------------------------------------------------

def save_embeddings(path, records):
    """CSV with header utterance_id,speaker_id,e0,...; repr-exact floats."""
    records = list(records)
    if not records:
        raise ValueError("no embeddings to save")
    dim = len(records[0].vector)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["utterance_id", "speaker_id"]
                        + [f"e{i}" for i in range(dim)])
        for r in records:
            if len(r.vector) != dim:
                raise ValueError(f"embedding dim mismatch for {r.utterance_id}: "
                                 f"{len(r.vector)} vs {dim}")
            writer.writerow([r.utterance_id, r.speaker_id]
                            + [repr(float(x)) for x in r.vector])


def load_embeddings(path) -> list[EmbeddingRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["utterance_id", "speaker_id"]:
            raise ValueError(f"{path} is not an embedding CSV")
        dim = len(header) - 2
        out = []
        for row in reader:
            if len(row) != dim + 2:
                raise ValueError(f"row for {row[0] if row else '?'} has "
                                 f"{len(row) - 2} values, expected {dim}")
            vec = np.array([float(x) for x in row[2:]])
            out.append(EmbeddingRecord(row[0], row[1], vec))
    if not out:
        raise ValueError(f"{path} contains no embeddings")
    return out


def save_trials(path, trials, scores):
    trials = list(trials)
    scores = np.asarray(scores, dtype=np.float64)
    if len(trials) != len(scores):
        raise ValueError(f"{len(trials)} trials but {len(scores)} scores")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["enrol_speaker", "test_utterance", "score", "target"])
        for tr, s in zip(trials, scores):
            writer.writerow([tr.enrol_speaker, tr.test_utterance,
                             repr(float(s)), int(tr.target)])


def load_trials(path) -> tuple[np.ndarray, np.ndarray]:
    """Scores and target flags from a trials CSV."""
    scores, targets = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["enrol_speaker", "test_utterance", "score", "target"]:
            raise ValueError(f"{path} is not a trials CSV")
        for row in reader:
            scores.append(float(row[2]))
            targets.append(bool(int(row[3])))
    return np.array(scores), np.array(targets, dtype=bool)


def save_eer_report(path, eer: float, threshold: float):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"EER={eer:.4f}\n")
        fh.write(f"threshold={threshold!r}\n")
