"""Deterministic synthetic semantic world.

Scenes are tuples of categorical attributes; a fixed seeded linear map
plays the role of the frozen multimodal encoder, another the frozen text
encoder.  Everything downstream (corpora, triplets, galleries, benchmark
queries) is generated from counter-based streams so regeneration is
bitwise reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .blobio import read_blob, write_blob
from .errors import ConfigError, InputError
from .retrieval import GalleryIndex
from .rng import stream


def normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class WorldConfig:
    n_attrs: int = 6
    n_values: int = 8
    d_vl: int = 64
    d_text: int = 32
    kappa: float = 0.2
    rho_desc: float = 0.5
    short_caption_frac: float = 5.0 / 33.0
    seed: int = 0

    @property
    def vocab_size(self) -> int:
        # value tokens, attribute-name tokens, 4 specials
        return self.n_attrs * self.n_values + self.n_attrs + 4

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in
                ("n_attrs", "n_values", "d_vl", "d_text", "kappa",
                 "rho_desc", "short_caption_frac", "seed")}

    @classmethod
    def from_json(cls, d: dict) -> "WorldConfig":
        return cls(**d)

    @classmethod
    def load(cls, path: str) -> "WorldConfig":
        with open(path) as f:
            return cls.from_json(json.load(f))

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)
            f.write("\n")


@dataclass(frozen=True)
class SceneSpec:
    attrs: tuple
    id: int


@dataclass(frozen=True)
class EditSpec:
    attr_index: int
    new_value: int
    tokens: tuple


@dataclass(frozen=True)
class TextSpec:
    tokens: tuple
    kind: str  # caption | edit | target_description


@dataclass(frozen=True)
class TextCondition:
    token_embs: np.ndarray  # (K, d_text)
    pooled: np.ndarray      # (d_text,)


@dataclass(frozen=True)
class TripletRecord:
    ref: SceneSpec
    edit: EditSpec
    target: SceneSpec
    target_caption: TextSpec
    z_ref_delta: np.ndarray
    z_target: np.ndarray
    c_delta: TextCondition


@dataclass(frozen=True)
class PairRecord:
    scene: SceneSpec
    caption: TextSpec
    z0: np.ndarray
    c_text: TextCondition


@dataclass(frozen=True)
class BenchmarkQuery:
    triplet: TripletRecord
    description: TextSpec          # oracle target-oriented description
    c_desc: TextCondition
    target_ids: tuple              # all valid targets present in the gallery


class World:
    """Oracle encoders and generators for one world configuration."""

    def __init__(self, config: WorldConfig = WorldConfig()):
        if config.n_attrs < 2 or config.n_values < 2:
            raise ConfigError("need at least 2 attributes and 2 values")
        self.config = config
        c = config
        self.P_sem = self._seeded_matrix("P_sem", c.d_vl, c.n_attrs * c.n_values)
        self.P_txt = self._seeded_matrix("P_txt", c.d_vl, c.vocab_size)
        self.E_tok = self._seeded_matrix("E_tok", c.vocab_size, c.d_text)

    def _seeded_matrix(self, name, rows, cols):
        m = stream(self.config.seed, "world", name).standard_normal((rows, cols))
        return m / np.linalg.norm(m, axis=0, keepdims=True)

    # -- vocabulary ------------------------------------------------------------

    def value_token(self, attr: int, value: int) -> int:
        return attr * self.config.n_values + value

    def attr_token(self, attr: int) -> int:
        return self.config.n_attrs * self.config.n_values + attr

    @property
    def special_tokens(self) -> dict:
        base = self.config.n_attrs * self.config.n_values + self.config.n_attrs
        return {"CAP": base, "EDIT": base + 1, "DESC": base + 2, "SEP": base + 3}

    # -- scenes and edits --------------------------------------------------------

    def scene_id(self, attrs) -> int:
        import hashlib
        payload = repr((self.config.seed, tuple(int(a) for a in attrs))).encode()
        digest = hashlib.blake2b(payload, digest_size=8).digest()
        return int.from_bytes(digest, "little") & ((1 << 63) - 1)

    def scene(self, attrs) -> SceneSpec:
        attrs = tuple(int(a) for a in attrs)
        if len(attrs) != self.config.n_attrs:
            raise InputError(f"expected {self.config.n_attrs} attributes")
        if any(a < 0 or a >= self.config.n_values for a in attrs):
            raise InputError("attribute value out of range")
        return SceneSpec(attrs=attrs, id=self.scene_id(attrs))

    def random_scene(self, rng: np.random.Generator) -> SceneSpec:
        return self.scene(rng.integers(0, self.config.n_values,
                                       self.config.n_attrs))

    def edit(self, attr_index: int, new_value: int) -> EditSpec:
        if not (0 <= attr_index < self.config.n_attrs):
            raise InputError(f"attr_index out of range: {attr_index}")
        if not (0 <= new_value < self.config.n_values):
            raise InputError(f"new_value out of range: {new_value}")
        tokens = (self.special_tokens["EDIT"], self.attr_token(attr_index),
                  self.value_token(attr_index, new_value))
        return EditSpec(attr_index=attr_index, new_value=new_value,
                        tokens=tokens)

    def apply_edit(self, attrs, edit: EditSpec) -> tuple:
        out = list(attrs)
        out[edit.attr_index] = edit.new_value
        return tuple(out)

    # -- texts -----------------------------------------------------------------

    def caption(self, scene: SceneSpec, attrs_subset=None) -> TextSpec:
        """Caption mentioning the given attributes (all of them by default)."""
        idxs = range(self.config.n_attrs) if attrs_subset is None else attrs_subset
        tokens = [self.special_tokens["CAP"]]
        for i in idxs:
            i = int(i)
            tokens += [self.attr_token(i), self.value_token(i, scene.attrs[i])]
        return TextSpec(tokens=tuple(tokens), kind="caption")

    def short_caption(self, scene: SceneSpec, rng: np.random.Generator) -> TextSpec:
        k = int(rng.integers(1, self.config.n_attrs))
        subset = sorted(rng.choice(self.config.n_attrs, size=k, replace=False))
        return self.caption(scene, attrs_subset=subset)

    def target_description(self, ref: SceneSpec, edit: EditSpec,
                           rng: np.random.Generator) -> TextSpec:
        """Oracle surrogate for the inferred target description.

        Mentions the edited attribute's new value plus a seeded rho-subset
        of the unchanged attributes, so the description is informative but
        deliberately incomplete.
        """
        target = self.apply_edit(ref.attrs, edit)
        tokens = [self.special_tokens["DESC"],
                  self.attr_token(edit.attr_index),
                  self.value_token(edit.attr_index, edit.new_value)]
        for i in range(self.config.n_attrs):
            if i == edit.attr_index:
                continue
            if rng.random() < self.config.rho_desc:
                tokens += [self.attr_token(i), self.value_token(i, target[i])]
        return TextSpec(tokens=tuple(tokens), kind="target_description")

    # -- oracle encoders ---------------------------------------------------------

    def _onehot(self, attrs) -> np.ndarray:
        v = np.zeros(self.config.n_attrs * self.config.n_values)
        for i, a in enumerate(attrs):
            v[self.value_token(i, a)] = 1.0
        return v

    def bow(self, tokens) -> np.ndarray:
        v = np.zeros(self.config.vocab_size)
        for t in tokens:
            if not (0 <= t < self.config.vocab_size):
                raise InputError(f"token id {t} outside vocabulary")
            v[t] += 1.0
        return v

    def oracle_image(self, scene: SceneSpec) -> np.ndarray:
        return normalize(self.P_sem @ self._onehot(scene.attrs))

    def oracle_fused(self, scene: SceneSpec, text: TextSpec) -> np.ndarray:
        if self.P_txt.shape[1] != self.config.vocab_size:
            raise ConfigError("text projector width does not match vocabulary")
        raw = (self.P_sem @ self._onehot(scene.attrs)
               + self.config.kappa * (self.P_txt @ self.bow(text.tokens)))
        return normalize(raw)

    def oracle_query(self, ref: SceneSpec, edit: EditSpec) -> np.ndarray:
        raw = (self.P_sem @ self._onehot(ref.attrs)
               + self.config.kappa * (self.P_txt @ self.bow(edit.tokens)))
        return normalize(raw)

    def encode_text(self, text: TextSpec) -> TextCondition:
        if len(text.tokens) == 0:
            raise InputError("cannot encode an empty token sequence")
        for t in text.tokens:
            if not (0 <= t < self.config.vocab_size):
                raise InputError(f"token id {t} outside vocabulary")
        embs = self.E_tok[list(text.tokens)]
        return TextCondition(token_embs=embs,
                             pooled=normalize(embs.mean(axis=0)))

    # -- generators --------------------------------------------------------------

    def gen_pair_corpus(self, n: int, seed: int) -> list:
        records = []
        for i in range(n):
            rng = stream(seed, "pair", i)
            scene = self.random_scene(rng)
            if rng.random() < self.config.short_caption_frac:
                cap = self.short_caption(scene, rng)
            else:
                cap = self.caption(scene)
            records.append(PairRecord(scene=scene, caption=cap,
                                      z0=self.oracle_fused(scene, cap),
                                      c_text=self.encode_text(cap)))
        return records

    def _random_edit(self, ref: SceneSpec, rng: np.random.Generator) -> EditSpec:
        # attribute 0 is the shared concept and is never edited
        attr = int(rng.integers(1, self.config.n_attrs))
        new = int(rng.integers(0, self.config.n_values - 1))
        if new >= ref.attrs[attr]:
            new += 1  # guarantee the edit changes the attribute
        return self.edit(attr, new)

    def gen_triplet(self, seed: int, index: int) -> TripletRecord:
        rng = stream(seed, "triplet", index)
        ref = self.random_scene(rng)
        edit = self._random_edit(ref, rng)
        target = self.scene(self.apply_edit(ref.attrs, edit))
        cap = self.caption(target)
        return TripletRecord(
            ref=ref, edit=edit, target=target, target_caption=cap,
            z_ref_delta=self.oracle_query(ref, edit),
            z_target=self.oracle_fused(target, cap),
            c_delta=self.encode_text(TextSpec(tokens=edit.tokens, kind="edit")))

    def gen_triplets(self, n: int, seed: int) -> list:
        return [self.gen_triplet(seed, i) for i in range(n)]

    def gen_benchmark(self, n_queries: int, gallery_size: int,
                      subset_size: int, seed: int):
        """Build (queries, gallery, subset map).

        The gallery holds every query target plus three per-query
        hard-negative tiers, dealt round-robin so every query gets an
        even share when the gallery fills up:

        * edited-attribute siblings -- the reference with the edited
          attribute set to some other value (visually near the
          reference, wrong edit result);
        * one-away siblings -- the reference with one unedited
          attribute rewritten (visually near the reference, edit not
          applied);
        * description-compatible decoys -- the target with one or two
          attributes the description leaves unmentioned rewritten
          (consistent with the text alone, but far from the
          reference).

        Random fillers make up the rest.  Each query carries a
        CIRCO-style multi-target set: all gallery scenes matching the
        shared concept and the edited attribute value.
        """
        if gallery_size < subset_size or subset_size < 2:
            raise ConfigError("need gallery_size >= subset_size >= 2")
        if gallery_size < n_queries:
            raise ConfigError("gallery cannot hold every query target")

        triplets = [self.gen_triplet(seed, i) for i in range(n_queries)]
        # descriptions are drawn first because the decoy tier depends on
        # which attributes they mention; the query loop below reuses the
        # same per-query stream for the subset draw
        qrngs = [stream(seed, "query", qi) for qi in range(n_queries)]
        descs = [self.target_description(t.ref, t.edit, qrngs[qi])
                 for qi, t in enumerate(triplets)]

        scenes: dict[int, SceneSpec] = {}

        def add(scene: SceneSpec) -> None:
            if len(scenes) < gallery_size:
                scenes.setdefault(scene.id, scene)

        for t in triplets:
            add(t.target)
        tiers = []
        for qi, t in enumerate(triplets):
            trng = stream(seed, "gallery-tier", qi)
            tier = []
            e = t.edit.attr_index
            sib_values = [v for v in range(self.config.n_values)
                          if v != t.edit.new_value]
            for v in trng.permutation(sib_values)[:7]:
                tier.append(self.scene(self.apply_edit(t.ref.attrs,
                                                       self.edit(e, int(v)))))
            others = [(a, v) for a in range(self.config.n_attrs) if a != e
                      for v in range(self.config.n_values)
                      if v != t.ref.attrs[a]]
            for i in trng.permutation(len(others))[:9]:
                a, v = others[int(i)]
                tier.append(self.scene(self.apply_edit(t.ref.attrs,
                                                       self.edit(a, v))))
            tier.extend(self._description_decoys(t, descs[qi], trng, 16))
            order = trng.permutation(len(tier))
            tiers.append([tier[i] for i in order])
        for rank_i in range(max(len(x) for x in tiers)):
            for tier in tiers:
                if rank_i < len(tier):
                    add(tier[rank_i])
        fill_rng = stream(seed, "gallery-fill")
        while len(scenes) < gallery_size:
            add(self.random_scene(fill_rng))

        gallery_scenes = list(scenes.values())
        gallery = GalleryIndex(
            ids=np.array([s.id for s in gallery_scenes], dtype=np.int64),
            embs=np.stack([self.oracle_image(s) for s in gallery_scenes]))

        by_id = {s.id: s for s in gallery_scenes}
        queries, subsets = [], {}
        for qi, t in enumerate(triplets):
            desc, qrng = descs[qi], qrngs[qi]
            matches = tuple(
                s.id for s in gallery_scenes
                if s.attrs[0] == t.ref.attrs[0]
                and s.attrs[t.edit.attr_index] == t.edit.new_value)
            queries.append(BenchmarkQuery(
                triplet=t, description=desc,
                c_desc=self.encode_text(desc), target_ids=matches))
            pool = [i for i in by_id if i != t.target.id]
            picks = qrng.choice(len(pool), size=subset_size - 1, replace=False)
            subsets[qi] = tuple([t.target.id] + [pool[int(p)] for p in picks])
        return queries, gallery, subsets

    def described_attrs(self, desc: TextSpec) -> tuple:
        """Attribute indices a description's tokens mention."""
        base = self.config.n_attrs * self.config.n_values
        return tuple(t - base for t in desc.tokens
                     if base <= t < base + self.config.n_attrs)

    def _description_decoys(self, triplet: TripletRecord, desc: TextSpec,
                            rng: np.random.Generator, count: int) -> list:
        """Scenes the description cannot rule out: the target with one
        or two unmentioned attributes rewritten."""
        free = [a for a in range(self.config.n_attrs)
                if a not in self.described_attrs(desc)]
        if not free:
            return []
        decoys, seen = [], {triplet.target.id}
        for _ in range(4 * count):
            if len(decoys) >= count:
                break
            k = 1 if len(free) == 1 else int(rng.integers(1, 3))
            attrs = list(triplet.target.attrs)
            for a in rng.permutation(free)[:k]:
                shift = int(rng.integers(1, self.config.n_values))
                attrs[a] = (attrs[a] + shift) % self.config.n_values
            scene = self.scene(attrs)
            if scene.id not in seen:
                seen.add(scene.id)
                decoys.append(scene)
        return decoys


# -- persistence ----------------------------------------------------------------

def save_pair_corpus(stem: str, world: World, records: list, seed: int) -> str:
    meta = {
        "kind": "pair_corpus",
        "seed": seed,
        "world": world.config.to_json(),
        "records": [{"attrs": list(r.scene.attrs),
                     "tokens": list(r.caption.tokens)} for r in records],
    }
    return write_blob(stem, {"z0": np.stack([r.z0 for r in records])
                             if records else np.zeros((0, world.config.d_vl))},
                      meta)


def load_pair_corpus(path: str):
    meta, tensors = read_blob(path)
    if meta.get("kind") != "pair_corpus":
        raise InputError(f"{path} is not a pair corpus")
    world = World(WorldConfig.from_json(meta["world"]))
    records = []
    for rec, z0 in zip(meta["records"], tensors["z0"].astype(np.float64)):
        scene = world.scene(rec["attrs"])
        cap = TextSpec(tokens=tuple(rec["tokens"]), kind="caption")
        records.append(PairRecord(scene=scene, caption=cap, z0=z0,
                                  c_text=world.encode_text(cap)))
    return world, records


def save_triplets(stem: str, world: World, triplets: list, seed: int) -> str:
    meta = {
        "kind": "triplets",
        "seed": seed,
        "world": world.config.to_json(),
        "records": [{"ref": list(t.ref.attrs),
                     "attr": t.edit.attr_index,
                     "value": t.edit.new_value} for t in triplets],
    }
    d = world.config.d_vl
    return write_blob(stem, {
        "z_ref_delta": np.stack([t.z_ref_delta for t in triplets])
        if triplets else np.zeros((0, d)),
        "z_target": np.stack([t.z_target for t in triplets])
        if triplets else np.zeros((0, d)),
    }, meta)


def _rebuild_triplet(world: World, rec: dict) -> TripletRecord:
    ref = world.scene(rec["ref"])
    edit = world.edit(rec["attr"], rec["value"])
    target = world.scene(world.apply_edit(ref.attrs, edit))
    cap = world.caption(target)
    return TripletRecord(
        ref=ref, edit=edit, target=target, target_caption=cap,
        z_ref_delta=world.oracle_query(ref, edit),
        z_target=world.oracle_fused(target, cap),
        c_delta=world.encode_text(TextSpec(tokens=edit.tokens, kind="edit")))


def load_triplets(path: str):
    meta, _ = read_blob(path)
    if meta.get("kind") != "triplets":
        raise InputError(f"{path} is not a triplet set")
    world = World(WorldConfig.from_json(meta["world"]))
    return world, [_rebuild_triplet(world, rec) for rec in meta["records"]]


def save_benchmark(stem: str, world: World, queries: list,
                   gallery: GalleryIndex, subsets: dict, seed: int) -> str:
    meta = {
        "kind": "benchmark",
        "seed": seed,
        "world": world.config.to_json(),
        "gallery_ids": [int(i) for i in gallery.ids],
        "subsets": {str(k): [int(i) for i in v] for k, v in subsets.items()},
        "queries": [{"ref": list(q.triplet.ref.attrs),
                     "attr": q.triplet.edit.attr_index,
                     "value": q.triplet.edit.new_value,
                     "desc_tokens": list(q.description.tokens),
                     "target_ids": [int(i) for i in q.target_ids]}
                    for q in queries],
    }
    return write_blob(stem, {"gallery_embs": gallery.embs}, meta)


def load_benchmark(path: str):
    meta, tensors = read_blob(path)
    if meta.get("kind") != "benchmark":
        raise InputError(f"{path} is not a benchmark")
    world = World(WorldConfig.from_json(meta["world"]))
    gallery = GalleryIndex(ids=np.array(meta["gallery_ids"], dtype=np.int64),
                           embs=tensors["gallery_embs"].astype(np.float64))
    queries = []
    for rec in meta["queries"]:
        t = _rebuild_triplet(world, {"ref": rec["ref"], "attr": rec["attr"],
                                     "value": rec["value"]})
        desc = TextSpec(tokens=tuple(rec["desc_tokens"]),
                        kind="target_description")
        queries.append(BenchmarkQuery(triplet=t, description=desc,
                                      c_desc=world.encode_text(desc),
                                      target_ids=tuple(rec["target_ids"])))
    subsets = {int(k): tuple(v) for k, v in meta["subsets"].items()}
    return world, queries, gallery, subsets
