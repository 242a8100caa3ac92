#!/usr/bin/env python3
# Tests for the planted-concept corpus generator

import os
import sys
import unittest
import tempfile
from pathlib import Path

import numpy as np

# Add project root to path to import the utils package
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from utils.errors import ConfigError, FilterLexError
from utils.embedding_store import load_embeddings
from utils.synth_corpus import (COLOR_WORDS, RED, SynthSpec, ConceptSpec, _place, bias_spec, default_spec, generate,
                                shape_mask, surrogate_vectors)
from tests.helper import make_corpus, tiny_spec


class TestGenerate(unittest.TestCase):
    """Corpus generation on disk"""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = Path(cls.tmp.name)
        cls.manifest, cls.embeddings = make_corpus(cls.dir / 'a', n_images=12, seed=5)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_manifest_contents(self):
        self.assertEqual(len(self.manifest), 12)
        self.assertEqual(set(self.manifest.concepts) <= {'brick', 'ball', 'roof', 'wave'}, True)
        for entry in self.manifest.entries:
            self.assertTrue(entry.image_path.exists())
            self.assertIn(len(entry.annotations), (1, 2))

    def test_masks_are_nonempty_and_disjoint(self):
        for entry in self.manifest.entries:
            masks = [a.mask for a in entry.annotations]
            for m in masks:
                self.assertGreater(int(m.sum()), 0)
            if len(masks) == 2:
                self.assertEqual(int((masks[0] & masks[1]).sum()), 0)

    def test_same_seed_same_bytes(self):
        make_corpus(self.dir / 'b', n_images=12, seed=5)
        for name in ('manifest.jsonl', 'images/000003.png', 'masks/000003_0.png'):
            self.assertEqual((self.dir / 'a' / name).read_bytes(), (self.dir / 'b' / name).read_bytes())

    def test_surrogate_embeddings_cover_concepts(self):
        table = load_embeddings(self.embeddings)
        for concept in ('brick', 'ball', 'roof', 'wave', 'square', 'disc'):
            self.assertIn(concept, table)

    def test_groups_written_with_bias(self):
        manifest, _ = make_corpus(self.dir / 'c', n_images=10, seed=1, group_bias={'brick': 1.0, 'ball': 0.0},
                                  max_concepts=1)
        for entry in manifest.entries:
            self.assertIn(entry.group, ('A', 'B'))
            if entry.concepts == ['brick']:
                self.assertEqual(entry.group, 'A')
            if entry.concepts == ['ball']:
                self.assertEqual(entry.group, 'B')


class TestPlacement(unittest.TestCase):
    """Non-overlapping shape placement"""

    def assert_disjoint(self, boxes):
        for i, (t1, l1, s1) in enumerate(boxes):
            for t2, l2, s2 in boxes[i + 1:]:
                self.assertTrue(t1 + s1 + 1 <= t2 or t2 + s2 + 1 <= t1 or l1 + s1 + 1 <= l2 or l2 + s2 + 1 <= l1)

    def test_image_that_greedy_placement_could_not_fill(self):
        # image 1734 of the default corpus with seed 1: a centred first shape leaves no room
        spec = default_spec(seed=1)
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(spec.n_images)[1734])
        count = int(rng.integers(1, spec.max_concepts_per_image + 1))
        rng.choice(len(spec.concepts), size=count, replace=False)
        sizes = [int(rng.integers(spec.min_shape_size, spec.max_shape_size + 1)) for _ in range(count)]
        boxes = _place(rng, sizes, spec.image_size, 1734, spec.min_shape_size)
        self.assertEqual(len(boxes), count)
        self.assert_disjoint(boxes)

    def test_largest_shapes_always_fit(self):
        for seed in range(300):
            rng = np.random.default_rng(seed)
            boxes = _place(rng, [22, 22], (64, 64), seed, 14)
            self.assert_disjoint(boxes)
            for top, left, size in boxes:
                self.assertTrue(14 <= size <= 22)
                self.assertTrue(0 <= top <= 64 - size and 0 <= left <= 64 - size)
            small = _place(rng, [12, 12], (32, 32), seed, 8)
            self.assert_disjoint(small)

    def test_impossible_layout_raises(self):
        with self.assertRaises(FilterLexError):
            _place(np.random.default_rng(0), [30, 30, 30], (32, 32), 0, 30)


class TestGroupSampling(unittest.TestCase):
    """Planted group bias"""

    def test_group_fraction_follows_bias(self):
        spec = SynthSpec(n_images=1000, image_size=(16, 16), concepts=[ConceptSpec('x', 'disc', RED)],
                         max_concepts_per_image=1, group_bias={'x': 0.9}, seed=3,
                         min_shape_size=4, max_shape_size=6)
        with tempfile.TemporaryDirectory() as tmp:
            manifest = generate(spec, tmp)
        share = sum(1 for e in manifest.entries if e.group == 'A') / len(manifest)
        self.assertLessEqual(abs(share - 0.9), 0.03)


class TestSpecs(unittest.TestCase):
    """Spec validation and presets"""

    def test_presets(self):
        spec = default_spec()
        self.assertEqual(len(spec.concepts), 8)
        self.assertEqual(spec.n_images, 2000)
        self.assertEqual(spec.image_size, (64, 64))
        planted = bias_spec().group_bias
        self.assertEqual(sorted(planted.values()), [0.1, 0.3, 0.5, 0.7, 0.9])

    def test_dict_round_trip(self):
        spec = tiny_spec(group_bias={'brick': 0.8})
        self.assertEqual(SynthSpec.from_dict(spec.to_dict()), spec)

    def test_unknown_shape(self):
        spec = tiny_spec()
        spec.concepts.append(ConceptSpec('star', 'hexagon', (1.0, 1.0, 0.0)))
        with self.assertRaises(ConfigError):
            spec.validate()

    def test_bias_out_of_range(self):
        with self.assertRaises(ConfigError):
            tiny_spec(group_bias={'brick': 1.5}).validate()

    def test_shape_masks(self):
        disc = shape_mask('disc', 9)
        np.testing.assert_array_equal(disc, disc[::-1, ::-1])
        self.assertEqual(shape_mask('square', 5).sum(), 25)
        triangle = shape_mask('triangle', 10)
        self.assertLess(triangle[0].sum(), triangle[-1].sum())


class TestSurrogateVectors(unittest.TestCase):
    """Attribute-structured surrogate embeddings"""

    def setUp(self):
        self.spec = default_spec()
        tokens, self.vectors = surrogate_vectors(self.spec, dim=50, seed=0)
        self.index = {t: i for i, t in enumerate(tokens)}

    def sim(self, a, b):
        return float(self.vectors[self.index[a]] @ self.vectors[self.index[b]])

    def test_shared_attributes_are_closer(self):
        concepts = self.spec.concepts
        same_shape, unrelated = [], []
        for i, a in enumerate(concepts):
            for b in concepts[i + 1:]:
                if a.shape == b.shape:
                    same_shape.append(self.sim(a.name, b.name))
                elif a.color != b.color:
                    unrelated.append(self.sim(a.name, b.name))
        self.assertGreater(np.mean(same_shape), np.mean(unrelated))
        self.assertGreater(self.sim('apple', 'disc'), self.sim('apple', 'square'))

    def test_colour_only_query_lands_on_colour_words(self):
        red = [self.vectors[self.index[c.name]] for c in self.spec.concepts if c.color == RED]
        query = np.mean(red, axis=0)
        query /= np.linalg.norm(query)
        ranked = sorted(self.index, key=lambda t: -float(self.vectors[self.index[t]] @ query))
        self.assertEqual(set(ranked[:5]), set(COLOR_WORDS[RED]))

    def test_concept_is_its_own_nearest_word(self):
        for concept in self.spec.concepts:
            query = self.vectors[self.index[concept.name]]
            best = max(self.index, key=lambda t: float(self.vectors[self.index[t]] @ query))
            self.assertEqual(best, concept.name)

    def test_rows_unit_norm(self):
        _, vectors = surrogate_vectors(default_spec(), dim=20, seed=2)
        np.testing.assert_allclose(np.linalg.norm(vectors, axis=1), 1.0, atol=1e-9)


if __name__ == '__main__':
    unittest.main()
