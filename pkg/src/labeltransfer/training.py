"""End-to-end training loop: composite loss, warmup, prototype refresh.

Per batch, one define-by-run graph is built over all trainable parameters.
The composite objective is

    total = bce_known + bce_intra_pseudo + bce_cross_pseudo
            + w_cooccur * asymmetric pair loss
            + w_ranking * feature ranking loss
            + w_threshold * (intra + cross threshold losses)

Pseudo labels are regenerated from the current model every batch and are
never persisted. During warmup no pseudo labels are emitted and the
threshold losses are off. Prototype banks are rebuilt from current features
at the start of every post-warmup epoch.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict, fields as dc_fields

import numpy as np

from . import autodiff as ad
from . import cooccur, features, prototypes, thresholds
from .data import Dataset
from .metrics import evaluate

HISTORY_COLUMNS = [
    "epoch", "lr", "loss_total", "loss_cls", "loss_ist", "loss_cst",
    "loss_dtl", "theta_intra", "theta_cross",
    "pseudo_precision_intra", "pseudo_recall_intra",
    "pseudo_precision_cross", "pseudo_recall_cross", "test_map",
]

MODES = ("baseline", "ist-only", "cst-only", "full")
ABLATION_MODES = MODES + ("ist-stat", "cst-il")

CHECKPOINT_VERSION = 1


class TrainingError(Exception):
    """Divergence or invalid configuration during training."""


@dataclass
class TrainConfig:
    epochs: int = 20
    warmup_epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.1
    weight_decay: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    lambda_cooccur: float = 10.0
    lambda_ranking: float = 0.05
    lambda_threshold: float = 0.1
    num_prototypes: int = 10
    feature_dim: int = 64
    pair_hidden: tuple = (512, 1024)
    gamma_pos: float = 1.0
    gamma_neg: float = 2.0
    margin: float = 0.05
    dtl_beta: float = 4.0
    theta_init: float = 0.5
    threshold_lr: float = 0.02
    learn_thresholds: bool = True
    mode: str = "full"
    aux_updates_features: bool = True
    seed: int = 0

    def validate(self):
        if self.warmup_epochs >= self.epochs:
            raise TrainingError("warmup_epochs must be < epochs")
        if min(self.lambda_cooccur, self.lambda_ranking, self.lambda_threshold) < 0:
            raise TrainingError("loss weights must be >= 0")
        if self.mode not in ABLATION_MODES:
            raise TrainingError(f"unknown mode {self.mode!r}")

    @property
    def uses_intra(self):
        return self.mode in ("full", "ist-only", "ist-stat")

    @property
    def uses_cross(self):
        return self.mode in ("full", "cst-only", "cst-il")


@dataclass
class TrainState:
    sarl: features.SarlParams
    pair: cooccur.PairNetParams
    threshold_pair: thresholds.ThresholdPair
    bank: prototypes.PrototypeBank | None
    adam_m: dict
    adam_v: dict
    adam_t: int
    epoch: int
    rng: np.random.Generator
    history: list = field(default_factory=list)


def init_state(config: TrainConfig, num_categories, region_dim) -> TrainState:
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x74726169)))
    sarl = features.init_sarl(rng, num_categories, region_dim, config.feature_dim)
    pair = cooccur.init_pair_net(rng, config.feature_dim, config.pair_hidden)
    pair_t = thresholds.ThresholdPair(config.theta_init, config.theta_init)
    adam_m, adam_v = {}, {}
    for name, arr in _named_params(sarl, pair):
        adam_m[name] = np.zeros_like(arr)
        adam_v[name] = np.zeros_like(arr)
    return TrainState(sarl, pair, pair_t, None, adam_m, adam_v, 0, 0, rng)


def _named_params(sarl, pair):
    return features.param_items(sarl, "sarl") + features.param_items(pair, "pair")


def partial_bce(graph, probs, labels):
    """Partial BCE: negative log-likelihood over known labels only.

    probs: graph tensor (B, C); labels: numpy ternary (B, C) or (C,). Each
    sample is normalized by its known-label count; samples with no known
    labels contribute 0; the result is the mean over samples.
    """
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[None]
    pos = (labels == 1).astype(np.float64)
    neg = (labels == -1).astype(np.float64)
    counts = (pos + neg).sum(axis=1)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    p = graph.clip(probs, 1e-7, 1.0 - 1e-7)
    one = graph.leaf(1.0)
    ll = graph.add(graph.mul(graph.leaf(pos), graph.log(p)),
                   graph.mul(graph.leaf(neg), graph.log(graph.sub(one, p))))
    per_sample = graph.mul(graph.sum(ll, axis=1), graph.leaf(inv))
    return graph.neg(graph.mean(per_sample))


def pseudo_to_ternary(pseudo):
    """Pseudo vectors carry positives only: 1 -> +1, 0 -> unknown."""
    return np.asarray(pseudo, dtype=np.int64)


@dataclass
class BatchResult:
    graph: ad.Graph
    total: ad.Tensor
    components: dict
    leaves: dict
    theta_leaves: dict
    pseudo_intra: np.ndarray | None
    pseudo_cross: np.ndarray | None


def build_batch(state: TrainState, config: TrainConfig, regions, labels,
                warmup, stat_cooc=None):
    """Construct the per-batch graph and composite loss."""
    g = ad.Graph()
    leaves = features.sarl_leaves(g, state.sarl)
    need_pairnet = config.uses_intra and config.mode != "ist-stat"
    if need_pairnet:
        leaves.update(cooccur.pair_net_leaves(g, state.pair))
    th_i = g.leaf(state.threshold_pair.effective()[0], trainable=True)
    th_c = g.leaf(state.threshold_pair.effective()[1], trainable=True)

    regions_t = g.leaf(regions)
    feats = features.extract_category_features(g, regions_t, leaves)
    probs = features.classify(g, feats, leaves)

    zero = g.leaf(0.0)
    components = {}

    # the pair-network loss optionally stops gradients into the shared
    # features; the ranking loss never does, since shaping the features is
    # its entire purpose
    aux_feats = feats
    if not config.aux_updates_features:
        aux_feats = g.leaf(feats.data)

    cooc_t = None
    cooc_np = None
    if config.uses_intra:
        if config.mode == "ist-stat":
            cooc_np = np.broadcast_to(stat_cooc, (labels.shape[0],) + stat_cooc.shape)
        else:
            cooc_t = cooccur.predict_cooccurrence(g, aux_feats, leaves)
            cooc_np = cooc_t.data

    sims = None
    if config.uses_cross and state.bank is not None:
        if config.mode == "cst-il":
            sims = prototypes.instance_level_similarity(feats.data, labels)
        else:
            sims = prototypes.prototype_similarity(feats.data, state.bank)

    pseudo_intra = pseudo_cross = None
    ti_eff, tc_eff = state.threshold_pair.effective()
    if not warmup:
        if cooc_np is not None:
            pseudo_intra = cooccur.generate_intra_pseudo_labels(
                cooc_np, labels, ti_eff)
        if sims is not None:
            pseudo_cross = prototypes.generate_cross_pseudo_labels(
                sims, labels, tc_eff)

    # three separately normalized classification terms: known labels plus
    # one term per pseudo-label source
    cls_known = partial_bce(g, probs, labels)
    cls_intra = partial_bce(g, probs, pseudo_to_ternary(pseudo_intra)) \
        if pseudo_intra is not None and pseudo_intra.any() else zero
    cls_cross = partial_bce(g, probs, pseudo_to_ternary(pseudo_cross)) \
        if pseudo_cross is not None and pseudo_cross.any() else zero
    components["cls"] = g.add(g.add(cls_known, cls_intra), cls_cross)

    if need_pairnet:
        loss_ist, _ = cooccur.asymmetric_loss(
            g, cooc_t, labels,
            cooccur.AsymmetricLossConfig(config.gamma_pos, config.gamma_neg,
                                         config.margin))
    else:
        loss_ist = zero
    components["ist"] = loss_ist

    if config.uses_cross:
        loss_cst, _ = prototypes.ranking_loss(g, feats, labels)
    else:
        loss_cst = zero
    components["cst"] = loss_cst

    if not warmup and config.learn_thresholds and config.uses_intra \
            and cooc_np is not None:
        ev = cooccur.intra_evidence(cooc_np, labels)
        # positions without a co-occurrence voter have constant evidence 0;
        # they say nothing about the threshold, only drag it toward 0
        voters = (labels == 1).sum(axis=1, keepdims=True) - (labels == 1)
        dtl_i = thresholds.dtl_loss(g, ev, labels, th_i, config.dtl_beta,
                                    valid=voters >= 1)
    else:
        dtl_i = zero
    if not warmup and config.learn_thresholds and config.uses_cross \
            and sims is not None:
        dtl_c = thresholds.dtl_loss(g, sims.mean, labels, th_c,
                                    config.dtl_beta, valid=sims.valid)
    else:
        dtl_c = zero
    components["dtl_intra"] = dtl_i
    components["dtl_cross"] = dtl_c

    total = components["cls"]
    total = g.add(total, g.mul(g.leaf(config.lambda_cooccur), loss_ist))
    total = g.add(total, g.mul(g.leaf(config.lambda_ranking), loss_cst))
    total = g.add(total, g.mul(g.leaf(config.lambda_threshold),
                               g.add(dtl_i, dtl_c)))
    components["total"] = total

    for name, tensor in components.items():
        if not np.isfinite(tensor.data).all():
            raise TrainingError(f"non-finite loss component: {name}")

    return BatchResult(g, total, components, leaves,
                       {"intra": th_i, "cross": th_c},
                       pseudo_intra, pseudo_cross)


def _adam_step(state: TrainState, config: TrainConfig, grads, leaves, lr):
    state.adam_t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.adam_t
    for name, arr in _named_params(state.sarl, state.pair):
        leaf = leaves.get(name)
        if leaf is None:
            continue
        g = grads.get(leaf.node_id)
        if g is None:
            g = np.zeros_like(arr)
        g = g + config.weight_decay * arr
        m = state.adam_m[name]
        v = state.adam_v[name]
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        arr -= lr * mh / (np.sqrt(vh) + 1e-8)


def current_lr(config: TrainConfig, epoch):
    drops = epoch // config.lr_decay_every
    return config.learning_rate * (config.lr_decay_factor ** drops)


def extract_all_features(sarl_params, regions_array, batch_size=256):
    """Category features for many samples, without gradients."""
    out = []
    for start in range(0, len(regions_array), batch_size):
        g = ad.Graph()
        leaves = features.sarl_leaves(g, sarl_params)
        chunk = g.leaf(regions_array[start:start + batch_size])
        feats = features.extract_category_features(g, chunk, leaves)
        out.append(feats.data.copy())
    return np.concatenate(out, axis=0)


def train(dataset: Dataset, config: TrainConfig, full_labels=None,
          state: TrainState | None = None, log_path=None, eval_data=None):
    """Train on a partially labeled dataset. Returns (state, history rows).

    full_labels: optional (N, C) withheld complete labels, used only to
    monitor pseudo-label precision/recall. Passing a checkpointed `state`
    continues training from its epoch counter. eval_data: optional held-out
    Dataset; its mAP is logged per epoch in the `test_map` column.
    """
    config.validate()
    regions_all = dataset.region_array()
    labels_all = dataset.label_matrix()
    n, c = labels_all.shape
    if state is None:
        state = init_state(config, c, dataset.feature_dim)

    stat_cooc = None
    if config.mode == "ist-stat":
        stat_cooc = cooccur.statistical_cooccurrence(labels_all)

    for epoch in range(state.epoch, config.epochs):
        warmup = epoch < config.warmup_epochs
        lr = current_lr(config, epoch)

        if not warmup and config.uses_cross and config.mode != "cst-il":
            feats_all = extract_all_features(state.sarl, regions_all)
            state.bank = prototypes.build_prototypes(
                feats_all, labels_all, config.num_prototypes,
                seed=(config.seed << 8) + epoch)

        order = state.rng.permutation(n)
        sums = {k: 0.0 for k in ("total", "cls", "ist", "cst", "dtl")}
        nb = 0
        stats = {"intra": [0, 0, 0], "cross": [0, 0, 0]}  # tp, emitted, relevant

        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = build_batch(state, config, regions_all[idx],
                                labels_all[idx], warmup, stat_cooc)
            total_value = batch.total.data.item()
            if not np.isfinite(total_value) or total_value > 1e6:
                raise TrainingError(
                    f"divergence at epoch {epoch}: total={total_value}, "
                    f"components={{{', '.join(f'{k}={v.data.item():.4g}' for k, v in batch.components.items())}}}")
            grads = ad.backward(batch.graph, batch.total)
            _adam_step(state, config, grads, batch.leaves, lr)
            if not warmup and config.learn_thresholds:
                gi = grads.get(batch.theta_leaves["intra"].node_id)
                gc = grads.get(batch.theta_leaves["cross"].node_id)
                thresholds.step_thresholds(
                    (None if gi is None else gi.item(),
                     None if gc is None else gc.item()),
                    state.threshold_pair, config.threshold_lr)

            sums["total"] += total_value
            sums["cls"] += batch.components["cls"].data.item()
            sums["ist"] += batch.components["ist"].data.item()
            sums["cst"] += batch.components["cst"].data.item()
            sums["dtl"] += (batch.components["dtl_intra"].data.item()
                            + batch.components["dtl_cross"].data.item())
            nb += 1

            if full_labels is not None:
                unknown = labels_all[idx] == 0
                truth = full_labels[idx] == 1
                for key, pseudo in (("intra", batch.pseudo_intra),
                                    ("cross", batch.pseudo_cross)):
                    rel = (truth & unknown).sum()
                    stats[key][2] += rel
                    if pseudo is not None:
                        emitted = (pseudo == 1) & unknown
                        stats[key][0] += (emitted & truth).sum()
                        stats[key][1] += emitted.sum()

        row = {
            "epoch": epoch,
            "lr": lr,
            "loss_total": sums["total"] / nb,
            "loss_cls": sums["cls"] / nb,
            "loss_ist": sums["ist"] / nb,
            "loss_cst": sums["cst"] / nb,
            "loss_dtl": sums["dtl"] / nb,
            "theta_intra": float(state.threshold_pair.effective()[0]),
            "theta_cross": float(state.threshold_pair.effective()[1]),
        }
        for key in ("intra", "cross"):
            tp, emitted, relevant = stats[key]
            row[f"pseudo_precision_{key}"] = (
                tp / emitted if emitted > 0 else None)
            row[f"pseudo_recall_{key}"] = (
                tp / relevant if relevant > 0 and full_labels is not None else None)
        row["test_map"] = (None if eval_data is None
                           else evaluate_state(state, eval_data).map_score)
        state.history.append(row)
        state.epoch = epoch + 1

    if log_path is not None:
        write_history_csv(state.history, log_path)
    return state, state.history


def predict(state: TrainState, data, batch_size=64):
    """Per-sample category probabilities; pseudo-label machinery unused."""
    regions = data.region_array() if isinstance(data, Dataset) else np.asarray(data)
    out = []
    for start in range(0, len(regions), batch_size):
        g = ad.Graph()
        leaves = features.sarl_leaves(g, state.sarl)
        chunk = g.leaf(regions[start:start + batch_size])
        feats = features.extract_category_features(g, chunk, leaves)
        probs = features.classify(g, feats, leaves)
        out.append(probs.data.copy())
    return np.concatenate(out, axis=0)


def evaluate_state(state: TrainState, dataset: Dataset):
    probs = predict(state, dataset)
    return evaluate(probs, dataset.label_matrix())


def write_history_csv(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([
                "" if row.get(col) is None else repr(float(row[col]))
                if isinstance(row[col], float) else row[col]
                for col in HISTORY_COLUMNS])


# ------------------------------------------------------------- checkpointing

def save_checkpoint(state: TrainState, config: TrainConfig, path):
    arrays = {}
    for name, arr in _named_params(state.sarl, state.pair):
        arrays["param/" + name] = arr
        arrays["adam_m/" + name] = state.adam_m[name]
        arrays["adam_v/" + name] = state.adam_v[name]
    if state.bank is not None:
        arrays["bank/prototypes"] = state.bank.prototypes
        arrays["bank/counts"] = state.bank.counts
        arrays["bank/valid"] = state.bank.valid
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": {f.name: getattr(config, f.name) for f in dc_fields(config)},
        "epoch": state.epoch,
        "adam_t": state.adam_t,
        "thresholds": {
            "theta_intra": state.threshold_pair.theta_intra,
            "theta_cross": state.threshold_pair.theta_cross,
            "intra_state": asdict(state.threshold_pair.intra_state),
            "cross_state": asdict(state.threshold_pair.cross_state),
        },
        "rng_state": state.rng.bit_generator.state,
        "history": state.history,
    }
    arrays["meta"] = np.frombuffer(
        json.dumps(meta, default=_json_default).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def load_checkpoint(path):
    """Returns (state, config) reconstructed from a checkpoint file."""
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(bytes(blob["meta"]).decode("utf-8"))
        if meta["version"] != CHECKPOINT_VERSION:
            raise TrainingError(f"unsupported checkpoint version {meta['version']}")
        cfg_dict = meta["config"]
        cfg_dict["pair_hidden"] = tuple(cfg_dict["pair_hidden"])
        config = TrainConfig(**cfg_dict)
        params = {k[len("param/"):]: blob[k].copy()
                  for k in blob.files if k.startswith("param/")}
        sarl = features.SarlParams(**{k.split(".", 1)[1]: v
                                      for k, v in params.items()
                                      if k.startswith("sarl.")})
        pair = cooccur.PairNetParams(**{k.split(".", 1)[1]: v
                                        for k, v in params.items()
                                        if k.startswith("pair.")})
        adam_m = {k[len("adam_m/"):]: blob[k].copy()
                  for k in blob.files if k.startswith("adam_m/")}
        adam_v = {k[len("adam_v/"):]: blob[k].copy()
                  for k in blob.files if k.startswith("adam_v/")}
        bank = None
        if "bank/prototypes" in blob.files:
            bank = prototypes.PrototypeBank(
                blob["bank/prototypes"].copy(), blob["bank/counts"].copy(),
                blob["bank/valid"].copy())
    th = meta["thresholds"]
    pair_t = thresholds.ThresholdPair(
        th["theta_intra"], th["theta_cross"],
        thresholds.AdamScalar(**th["intra_state"]),
        thresholds.AdamScalar(**th["cross_state"]))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = TrainState(sarl, pair, pair_t, bank, adam_m, adam_v,
                       meta["adam_t"], meta["epoch"], rng, meta["history"])
    return state, config
