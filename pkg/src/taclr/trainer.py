"""Contrastive training of the shared encoder.

Each (item, attribute) training example contrasts one positive value
against negatives drawn from the same category-attribute value set
(taxonomy-aware mode) or from the other positives in the mini-batch
(in-batch baseline). Items with no ground-truth value for an attribute
take the pair's null entry as the positive, which is what later lets the
null similarity act as a decision threshold at inference.

Gradients are computed analytically (softmax cross-entropy through dot
products, L2 normalization, the linear projection, and mean pooling) and
verified against central finite differences by ``grad_check``.
"""

from __future__ import annotations

import math
import random
import string
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .encoder import (
    EncoderConfig,
    EncoderParams,
    ParamGrads,
    bag_row,
    featurize,
    init_encoder,
    params_digest,
    render_item_prompt,
    render_value_prompt,
    rows_to_csr,
)
from .errors import ConfigError, DataError, TrainingError
from .taxonomy import NULL_VALUE_ID, Taxonomy, ValueEntry, candidate_values

SAMPLING_MODES = ("taxonomy_aware", "in_batch")


@dataclass
class ProductItem:
    """One product listing with per-attribute ground-truth value-id sets.

    An empty (or missing) label set means the attribute has no value for
    this item; the reserved null id never appears in labels.
    """

    item_id: str
    category: str
    title: str
    description: str = ""
    labels: dict[str, set[str]] = field(default_factory=dict)
    value_kind_tags: dict[str, str] | None = None

    def label_set(self, attribute: str) -> set[str]:
        return self.labels.get(attribute, set())


@dataclass(frozen=True)
class TrainConfig:
    k: int = 128
    tau: float = 0.05
    learning_rate: float = 0.05
    epochs: int = 5
    batch_size: int = 32
    sampling: str = "taxonomy_aware"
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"sampling must be one of {SAMPLING_MODES}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")


@dataclass
class ContrastSet:
    """Positive value, sampled negatives, and logit padding count.

    ``negative_contexts`` carries each negative's own (category,
    attribute) when it comes from another pair (in-batch sampling); None
    means all negatives share the item's pair.
    """

    positive: ValueEntry
    negatives: list[ValueEntry]
    pad_count: int
    negative_contexts: list[tuple[str, str]] | None = None


@dataclass
class TrainReport:
    per_epoch_loss: list[float]
    steps: int
    final_params_digest: str


def loss_from_similarities(sims: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy over similarity logits sims/tau, index 0 positive.

    Returns (loss, d loss / d sims). Padded logits are fixed at -inf and
    contribute zero probability and zero gradient, so they are simply not
    materialized. Adding a constant to all similarities leaves the loss
    unchanged (softmax shift invariance).
    """
    z = np.asarray(sims, dtype=np.float64) / tau
    m_idx = int(np.argmax(z))
    shifted = np.exp(z - z[m_idx])
    if m_idx == 0:
        rest = float(shifted[1:].sum())
        loss = math.log1p(rest)
        total = 1.0 + rest
    else:
        total = float(shifted.sum())
        loss = math.log(total) + float(z[m_idx] - z[0])
    g = shifted / (total * tau)
    g[0] -= 1.0 / tau
    return loss, g


def contrastive_loss(
    item_emb: np.ndarray,
    pos_emb: np.ndarray,
    neg_embs: list[np.ndarray],
    pad_count: int,
    tau: float,
) -> tuple[float, tuple[np.ndarray, np.ndarray, list[np.ndarray]]]:
    """Loss and exact gradients w.r.t. the item, positive, and negative embeddings."""
    if tau <= 0:
        raise ConfigError("tau must be positive")
    if pad_count < 0:
        raise ConfigError("pad_count must be >= 0")
    vecs = [np.asarray(item_emb, dtype=np.float64), np.asarray(pos_emb, dtype=np.float64)]
    vecs += [np.asarray(v, dtype=np.float64) for v in neg_embs]
    if any(not np.all(np.isfinite(v)) for v in vecs):
        raise DataError("non-finite input embedding")
    item, pos, negs = vecs[0], vecs[1], vecs[2:]
    sims = np.array([item @ pos] + [item @ n for n in negs])
    loss, g_sims = loss_from_similarities(sims, tau)
    g_item = g_sims[0] * pos
    for gj, n in zip(g_sims[1:], negs):
        g_item = g_item + gj * n
    g_pos = g_sims[0] * item
    g_negs = [gj * item for gj in g_sims[1:]]
    return loss, (g_item, g_pos, g_negs)


def sample_contrast_set(
    item: ProductItem,
    attribute: str,
    t: Taxonomy,
    k: int,
    rng: random.Random,
) -> ContrastSet:
    """Taxonomy-aware sampling within the item's (category, attribute) pair.

    The positive is the null entry when the label set is empty, otherwise
    drawn uniformly from the labels. Negatives are drawn uniformly without
    replacement from the pair's non-null values minus all ground-truth
    values (not just the drawn positive), up to k - 1.
    """
    if k < 2:
        raise ConfigError("k must be >= 2")
    gt = item.label_set(attribute)
    pool = candidate_values(t, item.category, attribute, include_null=False)
    if gt:
        by_id = {e.value_id: e for e in pool}
        pos_id = rng.choice(sorted(gt))
        try:
            positive = by_id[pos_id]
        except KeyError:
            raise DataError(
                f"item {item.item_id}: label {pos_id!r} not in pair "
                f"({item.category}, {attribute})"
            ) from None
    else:
        positive = t.null_entry(item.category, attribute)
    negatives_pool = [e for e in pool if e.value_id not in gt]
    n_neg = min(k - 1, len(negatives_pool))
    negatives = rng.sample(negatives_pool, n_neg)
    return ContrastSet(
        positive=positive,
        negatives=negatives,
        pad_count=(k - 1) - n_neg,
    )


class PairRowCache:
    """Featurized value prompt rows per (category, attribute) pair.

    Rows follow candidate order with null last; built lazily, valid for
    one (taxonomy, template, encoder config) combination.
    """

    def __init__(self, t: Taxonomy, template: str, cfg: EncoderConfig):
        self._t = t
        self._template = template
        self._cfg = cfg
        self._pairs: dict[tuple[str, str], tuple[list, dict[str, int]]] = {}

    def get(self, category: str, attribute: str) -> tuple[list, dict[str, int]]:
        key = (category, attribute)
        cached = self._pairs.get(key)
        if cached is None:
            rows = []
            row_of: dict[str, int] = {}
            for e in candidate_values(self._t, category, attribute, include_null=True):
                prompt = render_value_prompt(category, attribute, e.text, self._template)
                row_of[e.value_id] = len(rows)
                rows.append(bag_row(featurize(prompt, self._cfg)))
            cached = (rows, row_of)
            self._pairs[key] = cached
        return cached


def _batch_loss_and_grads(
    entries: list[tuple[ProductItem, dict[str, ContrastSet]]],
    params: EncoderParams,
    tau: float,
    template: str,
    pair_cache: PairRowCache | None,
) -> tuple[float, ParamGrads]:
    """Sum of item losses over the batch plus parameter gradients.

    Every distinct text in the batch is encoded once; the item embedding
    is shared across all of the item's attribute terms.
    """
    cfg = params.config
    rows: list = []
    row_of: dict[tuple[str, str, str], int] = {}
    plan: list[tuple[int, list[tuple[int, ...]]]] = []

    def value_row(category: str, attribute: str, entry: ValueEntry) -> int:
        key = (category, attribute, entry.value_id)
        idx = row_of.get(key)
        if idx is None:
            if pair_cache is not None:
                pair_rows, pos_of = pair_cache.get(category, attribute)
                row = pair_rows[pos_of[entry.value_id]]
            else:
                prompt = render_value_prompt(category, attribute, entry.text, template)
                row = bag_row(featurize(prompt, cfg))
            idx = len(rows)
            rows.append(row)
            row_of[key] = idx
        return idx

    for item, sets in entries:
        item_row = len(rows)
        rows.append(bag_row(featurize(render_item_prompt(item.title, item.description), cfg)))
        set_rows: list[tuple[int, ...]] = []
        for attribute, cs in sets.items():
            members = [value_row(item.category, attribute, cs.positive)]
            contexts = cs.negative_contexts or [(item.category, attribute)] * len(cs.negatives)
            for neg, (ncat, nattr) in zip(cs.negatives, contexts):
                members.append(value_row(ncat, nattr, neg))
            set_rows.append(tuple(members))
        plan.append((item_row, set_rows))

    fwd = enc.project_rows(rows_to_csr(rows, cfg.hash_buckets), params)
    emb = fwd.embeddings
    g_emb = np.zeros_like(emb)
    total_loss = 0.0
    for item_row, set_rows in plan:
        e_item = emb[item_row]
        for members in set_rows:
            idx = np.array(members, dtype=np.intp)
            vals = emb[idx]
            sims = vals @ e_item
            loss, g_sims = loss_from_similarities(sims, tau)
            total_loss += loss
            g_emb[item_row] += g_sims @ vals
            # Set members are distinct rows, so fancy-index += is safe here.
            g_emb[idx] += np.outer(g_sims, e_item)

    grads = ParamGrads.zeros_like(params)
    enc.backprop_rows(g_emb, fwd, params, grads)
    return total_loss, grads


def item_loss(
    item: ProductItem,
    contrast_sets: dict[str, ContrastSet],
    params: EncoderParams,
    tau: float,
    template: str = "full",
) -> tuple[float, ParamGrads]:
    """Sum of per-attribute contrastive losses for one item, with parameter grads."""
    return _batch_loss_and_grads([(item, contrast_sets)], params, tau, template, None)


def validate_item(item: ProductItem, t: Taxonomy) -> None:
    if not item.title:
        raise DataError(f"item {item.item_id}: empty title")
    for attribute, label in item.labels.items():
        if not t.has_pair(item.category, attribute):
            raise DataError(
                f"item {item.item_id}: pair ({item.category}, {attribute}) not in taxonomy"
            )
        if NULL_VALUE_ID in label:
            raise DataError(
                f"item {item.item_id}: reserved id {NULL_VALUE_ID!r} in labels "
                "(an empty set encodes null)"
            )
        unknown = label - t.value_ids(item.category, attribute)
        if unknown:
            raise DataError(
                f"item {item.item_id}: labels {sorted(unknown)} not in pair "
                f"({item.category}, {attribute})"
            )


def _draw_positive(
    item: ProductItem, attribute: str, t: Taxonomy, rng: random.Random
) -> ValueEntry:
    gt = item.label_set(attribute)
    if not gt:
        return t.null_entry(item.category, attribute)
    by_id = {e.value_id: e for e in candidate_values(t, item.category, attribute, False)}
    return by_id[rng.choice(sorted(gt))]


def _in_batch_sets(
    batch: list[ProductItem], t: Taxonomy, k: int, rng: random.Random
) -> list[dict[str, ContrastSet]]:
    """Contrastive sets whose negatives are the other items' drawn positives.

    Cross-pair values are admitted by design; each negative keeps its own
    pair context for prompt rendering. Values matching the item's own
    ground truth for the attribute are excluded.
    """
    drawn: list[tuple[int, str, ValueEntry]] = []
    for i, item in enumerate(batch):
        for attribute in t.attributes_of(item.category):
            drawn.append((i, attribute, _draw_positive(item, attribute, t, rng)))

    per_item: list[dict[str, ContrastSet]] = [dict() for _ in batch]
    for i, attribute, positive in drawn:
        item = batch[i]
        gt = item.label_set(attribute)
        seen = {(item.category, attribute, vid) for vid in gt}
        seen.add((item.category, attribute, positive.value_id))
        negatives: list[ValueEntry] = []
        contexts: list[tuple[str, str]] = []
        for j, other_attr, other_pos in drawn:
            if j == i or len(negatives) == k - 1:
                continue
            key = (batch[j].category, other_attr, other_pos.value_id)
            if key in seen:
                continue
            seen.add(key)
            negatives.append(other_pos)
            contexts.append((batch[j].category, other_attr))
        per_item[i][attribute] = ContrastSet(
            positive=positive,
            negatives=negatives,
            pad_count=(k - 1) - len(negatives),
            negative_contexts=contexts,
        )
    return per_item


def fit(
    dataset: list[ProductItem],
    t: Taxonomy,
    cfg: TrainConfig,
    encoder_cfg: EncoderConfig | None = None,
    template: str = "full",
) -> tuple[EncoderParams, TrainReport]:
    """Mini-batch SGD over the contrastive objective; deterministic per seed.

    Shuffling, sampling, and gradient accumulation follow a fixed order,
    so identical (dataset, config, seed) produce bit-identical parameters.
    """
    if not dataset:
        raise DataError("dataset must be non-empty")
    for item in dataset:
        validate_item(item, t)
    if encoder_cfg is None:
        encoder_cfg = EncoderConfig(seed=cfg.seed)
    params = init_encoder(encoder_cfg)
    pair_cache = PairRowCache(t, template, encoder_cfg)
    rng = random.Random(cfg.seed)
    velocity = ParamGrads.zeros_like(params) if cfg.momentum > 0 else None

    per_epoch: list[float] = []
    steps = 0
    order = list(range(len(dataset)))
    for _epoch in range(cfg.epochs):
        rng.shuffle(order)
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            if cfg.sampling == "taxonomy_aware":
                entries = []
                for item in batch:
                    sets = {
                        attribute: sample_contrast_set(item, attribute, t, cfg.k, rng)
                        for attribute in t.attributes_of(item.category)
                    }
                    entries.append((item, sets))
            else:
                entries = list(zip(batch, _in_batch_sets(batch, t, cfg.k, rng)))
            batch_loss, grads = _batch_loss_and_grads(
                entries, params, cfg.tau, template, pair_cache
            )
            if not math.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at step {steps}")
            scale = 1.0 / len(batch)
            if velocity is not None:
                velocity.feature_table *= cfg.momentum
                velocity.proj_weight *= cfg.momentum
                velocity.proj_bias *= cfg.momentum
                velocity.add_scaled(grads, scale)
                update = velocity
            else:
                grads.feature_table *= scale
                grads.proj_weight *= scale
                grads.proj_bias *= scale
                update = grads
            params.feature_table -= cfg.learning_rate * update.feature_table
            params.proj_weight -= cfg.learning_rate * update.proj_weight
            params.proj_bias -= cfg.learning_rate * update.proj_bias
            epoch_loss += batch_loss
            steps += 1
        per_epoch.append(epoch_loss / len(dataset))
    return params, TrainReport(
        per_epoch_loss=per_epoch,
        steps=steps,
        final_params_digest=params_digest(params),
    )


def grad_check(cfg: EncoderConfig, tcfg: TrainConfig, seed: int) -> float:
    """Compare analytic parameter gradients against central finite differences.

    Builds a random item and contrast set, then returns
    max over parameter entries of |analytic - numeric| / max(|numeric|, 1e-8)
    with eps = 1e-5. Intended for small dimensions.
    """
    rng = random.Random(seed)

    def word() -> str:
        return "".join(rng.choice(string.ascii_lowercase) for _ in range(rng.randint(3, 6)))

    category, attribute = word(), word()
    values = []
    while len(values) < 6:
        w = word()
        if w not in values:
            values.append(w)
    from .taxonomy import build_pair

    t = Taxonomy(entries={(category, attribute): build_pair(values)})
    gt = {rng.choice(values)}
    item = ProductItem(
        item_id="g0",
        category=category,
        title=" ".join(word() for _ in range(3)),
        description=" ".join(word() for _ in range(2)),
        labels={attribute: gt},
    )
    sets = {attribute: sample_contrast_set(item, attribute, t, tcfg.k, rng)}

    params = init_encoder(cfg)
    _, grads = item_loss(item, sets, params, tcfg.tau)

    eps = 1e-5
    max_rel = 0.0
    for arr, g in (
        (params.feature_table, grads.feature_table),
        (params.proj_weight, grads.proj_weight),
        (params.proj_bias, grads.proj_bias),
    ):
        flat = arr.reshape(-1)
        g_flat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = item_loss(item, sets, params, tcfg.tau)
            flat[i] = orig - eps
            down, _ = item_loss(item, sets, params, tcfg.tau)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            rel = abs(g_flat[i] - numeric) / max(abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel
