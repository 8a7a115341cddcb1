"""Independent oracles shared by the test modules."""
from collections import Counter
from pathlib import Path

import numpy as np


def cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


def central_diff(f, x, h=1e-3):
    """Central finite differences of scalar ``f`` at array ``x`` (f64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2 * h)
    return grad


def rel_err(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else np.linalg.norm(a - b) / denom


def brute_proto_logits(support, labels, query, n_way, temperature=1.0):
    logits = np.zeros((len(query), n_way))
    for k in range(n_way):
        rows = [support[i] for i in range(len(support)) if labels[i] == k]
        centre = [sum(r[j] for r in rows) / len(rows) for j in range(support.shape[1])]
        for i, q in enumerate(query):
            logits[i, k] = -temperature * sum((q[j] - centre[j]) ** 2 for j in range(len(centre)))
    return logits


def learner_gradcheck(kind, n, m, d, seed, h=1e-3, n_query=2, **cfg_kw):
    """Compare analytic learner gradients with central differences of cross-entropy.

    Returns ``(relative_error, smooth)``.  ``smooth`` is False for the SVM when a
    stencil point changes the solver's projection active sets, i.e. the
    difference quotient straddles a kink of the piecewise-smooth unrolled map.
    """
    from fewshot_intent.learners import LearnerConfig, learner_backward, learner_forward

    gen = np.random.default_rng(seed)
    cfg_kw.setdefault("ridge_lambda", 1.0)
    cfg = LearnerConfig(kind=kind, temperature=float(gen.uniform(0.5, 2.0)), **cfg_kw)
    labels = np.repeat(np.arange(n), m)
    q_labels = np.repeat(np.arange(n), n_query)
    X = gen.standard_normal((n * m, d))
    Q = gen.standard_normal((n * n_query, d))

    def forward(X, Q, temp=cfg.temperature):
        c = LearnerConfig(kind=kind, temperature=temp, ridge_lambda=cfg.ridge_lambda,
                          svm_C=cfg.svm_C, svm_max_iter=cfg.svm_max_iter)
        return learner_forward(c, X, labels, Q, n)

    out = forward(X, Q)
    z = out.logits - out.logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    p[np.arange(len(q_labels)), q_labels] -= 1
    dX, dQ, dT = learner_backward(kind, out.state, p / len(q_labels))

    smooth = True
    base_masks = np.array(out.state.masks) if kind == "svm" else None

    def loss_X(Xv):
        nonlocal smooth
        o = forward(Xv, Q)
        if base_masks is not None and not np.array_equal(np.array(o.state.masks), base_masks):
            smooth = False
        return cross_entropy(o.logits, q_labels)

    num_X = central_diff(loss_X, X, h)
    num_Q = central_diff(lambda Qv: cross_entropy(forward(X, Qv).logits, q_labels), Q, h)
    num_T = central_diff(lambda t: cross_entropy(forward(X, Q, float(t[0])).logits, q_labels), np.array([cfg.temperature]), h)
    err = rel_err(np.concatenate([dX.ravel(), dQ.ravel(), [dT]]), np.concatenate([num_X.ravel(), num_Q.ravel(), num_T]))
    return err, smooth


def fake_manifest(n_classes, per_class, n_speakers, speaker_of=None):
    """Manifest without feature files, for protocol-only tests."""
    from fewshot_intent.dataset import DatasetManifest, UtteranceRecord

    records = []
    for k in range(n_classes):
        for j in range(per_class):
            spk = speaker_of(k, j) if speaker_of else (k * per_class + j) % n_speakers
            records.append(UtteranceRecord(f"c{k}_{j}", f"s{spk}", f"c{k:02d}", Path(f"/nowhere/c{k}_{j}.fsfa"), 1, 4))
    return DatasetManifest(records)


def check_episode(ep):
    spec = ep.spec
    sup = Counter(y for _, y in ep.support)
    qry = Counter(y for _, y in ep.query)
    assert sup == {k: spec.m_shot for k in range(spec.n_way)}
    assert qry == {k: spec.q_query for k in range(spec.n_way)}
    s_ids = {r.utterance_id for r, _ in ep.support}
    q_ids = {r.utterance_id for r, _ in ep.query}
    assert not s_ids & q_ids
    assert len(s_ids) == len(ep.support) and len(q_ids) == len(ep.query)
    assert len(set(ep.class_names)) == spec.n_way
    for r, y in ep.support + ep.query:
        assert r.label == ep.class_names[y]
