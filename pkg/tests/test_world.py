"""Synthetic world: rendering, detectors, oracles, sampling distribution."""

import numpy as np
import pytest

from deskdiff import world
from deskdiff.vocab import CLASS_NOUNS, CONTEXTS, MODIFIERS, NULL_PROMPT, tokenize
from deskdiff.world import SceneSpec, SubjectSpec


def scene(class_id="plushie", shape=None, context=None, **kw):
    shape = shape or world.CLASS_SHAPES[class_id]
    subj = SubjectSpec(class_id=class_id, shape=shape, color=world.CLASS_COLORS[class_id], **kw)
    return world.render_scene(SceneSpec(subj, context))


def test_glyph_cells_brute_force_counts():
    # disc of radius 2: brute-force count over the 5x5 box
    count = sum(
        1
        for dr in range(-2, 3)
        for dc in range(-2, 3)
        if (dr / 2) ** 2 + (dc / 2) ** 2 <= 1.0 + 1e-9
    )
    assert len(world.glyph_cells("disc", 2, 2)) == count == 13
    assert len(world.glyph_cells("square", 2, 2)) == 25
    assert len(world.glyph_cells("cross", 2, 2)) == 9


def test_render_background_and_area():
    img = scene()
    assert img.shape == (16, 16, 3)
    assert np.all(img >= -1.0) and np.all(img <= 1.0)
    # corner pixel is plain background
    assert np.allclose(img[0, 15], world.BG_NEUTRAL)


def test_render_out_of_bounds():
    subj = world.rare_subject()
    with pytest.raises(world.OutOfBoundsError):
        world.render_scene(SceneSpec(subj, None, (5, 5)))


def test_context_regions_disjoint_from_glyph():
    """Adding any context never changes a subject-area pixel."""
    plain = scene()
    area = (slice(*world.AREA_ROWS), slice(*world.AREA_COLS))
    for ctx in CONTEXTS:
        img = scene(context=ctx)
        if ctx == "night":
            continue  # night changes the global background by design
        assert np.array_equal(img[area], plain[area])


def test_exact_render_detector_scores():
    """Every pretraining render scores 1.0 on each prompt attribute."""
    rng = np.random.default_rng(0)
    for _ in range(60):
        image, tokens = world.sample_pretrain_example(rng)
        for word in tokens.words():
            assert world.detect(image, word) == pytest.approx(1.0), word


def test_cross_context_scores_low():
    for ctx in CONTEXTS:
        img = scene(context=ctx)
        for other in CONTEXTS:
            if other != ctx:
                assert world.detect(img, other) <= 0.3, (ctx, other)


def test_cross_class_scores_below_one():
    for cid in CLASS_NOUNS:
        img = scene(class_id=cid)
        for other in CLASS_NOUNS:
            s = world.detect(img, other)
            if other == cid:
                assert s == pytest.approx(1.0)
            else:
                assert s < 0.95, (cid, other)


def test_modifier_detectors():
    tall = scene(class_id="cup", tall=True)
    assert world.detect(tall, "tall") == pytest.approx(1.0)
    assert world.detect(scene(class_id="cup"), "tall") == 0.0

    striped = scene(class_id="cup", striped=True)
    assert world.detect(striped, "striped") >= 0.9
    assert world.detect(scene(class_id="cup"), "striped") <= 0.1

    tri = scene(class_id="plushie", shape="triangle")
    assert world.detect(tri, "triangular") == pytest.approx(1.0)
    assert world.detect(scene(class_id="plushie"), "triangular") < 0.9


def test_all_zeros_image_low_reward():
    zeros = np.zeros(world.IMAGE_SHAPE)
    for text in ("a [*] plushie with pens", "striped cup snow", "tall pot night"):
        assert world.reward(zeros, tokenize(text)) <= 0.4


def test_reward_is_mean_of_detectors():
    img = scene(class_id="cup", striped=True, context="snow")
    p = tokenize("striped cup snow")
    expect = np.mean([world.detect(img, w) for w in ("striped", "cup", "snow")])
    assert world.reward(img, p) == pytest.approx(expect)


def test_reward_identifier_stripping():
    img = world.reference_images(1)[0]
    p = tokenize("a [*] plushie")
    assert world.reward(img, p, strip_identifier=True) == pytest.approx(1.0)
    # unstripped scoring has no detector for the identifier
    with pytest.raises(ValueError):
        world.reward(img, p, strip_identifier=False)


def test_reward_null_prompt_rejected():
    zeros = np.zeros(world.IMAGE_SHAPE)
    with pytest.raises(world.NullPromptError):
        world.reward(zeros, NULL_PROMPT)
    with pytest.raises(world.NullPromptError):
        world.text_embed(NULL_PROMPT)


def test_reward_monotone_in_context_interpolation():
    """Reward rises monotonically as the context region fades in."""
    plain = scene(class_id="plushie")
    full = scene(class_id="plushie", context="grass")
    p = tokenize("plushie grass")
    scores = []
    for lam in np.linspace(0.0, 1.0, 11):
        img = (1 - lam) * plain + lam * full
        scores.append(world.reward(img, p))
    diffs = np.diff(scores)
    assert np.all(diffs >= -1e-12)
    assert scores[-1] > scores[0]


def test_text_image_embeds():
    p = tokenize("striped cup snow")
    tvec = world.text_embed(p)
    assert tvec.sum() == 3.0
    img = scene(class_id="cup", striped=True, context="snow")
    ivec = world.image_embed(img)
    assert ivec.shape == tvec.shape
    # named attributes score 1.0 in the image vector
    assert np.all(ivec[tvec == 1.0] == pytest.approx(1.0))


def test_pretrain_excludes_reserved_combo():
    rng = np.random.default_rng(1)
    for _ in range(500):
        _, tokens = world.sample_pretrain_example(rng)
        words = tokens.words()
        assert not ("plushie" in words and "triangular" in words)


def test_pretrain_class_marginal():
    """Class draw is uniform within 4 sigma over 3000 samples."""
    rng = np.random.default_rng(2)
    n = 3000
    counts = {c: 0 for c in CLASS_NOUNS}
    for _ in range(n):
        _, tokens = world.sample_pretrain_example(rng)
        for c in CLASS_NOUNS:
            if c in tokens.words():
                counts[c] += 1
    se = np.sqrt(n * (1 / 3) * (2 / 3))
    for c in CLASS_NOUNS:
        assert abs(counts[c] - n / 3) < 4 * se


def test_rare_subject_held_out():
    subj = world.rare_subject()
    assert (subj.class_id, "triangular" if subj.shape == "triangle" else None) == world.RESERVED_COMBO
    assert subj.color == world.RARE_COLOR
    assert subj.color not in world.CLASS_COLORS.values()


def test_reference_images_distinct_positions():
    refs = world.reference_images(4)
    assert len(refs) == 4
    for i in range(len(refs)):
        for j in range(i + 1, len(refs)):
            assert not np.array_equal(refs[i], refs[j])
    with pytest.raises(ValueError):
        world.reference_images(0)
    with pytest.raises(ValueError):
        world.reference_images(7)


def test_subject_features_translation_invariant():
    feats = [world.subject_features(im) for im in world.reference_images(6)]
    for f in feats:
        assert np.linalg.norm(f) == pytest.approx(1.0)
    for f in feats[1:]:
        assert float(np.dot(feats[0], f)) >= 0.99


def test_subject_features_discriminative():
    disc = world.subject_features(scene(class_id="plushie"))
    cross = world.subject_features(scene(class_id="pot"))
    assert float(np.dot(disc, cross)) <= 0.5


def test_subject_features_empty_image():
    assert np.array_equal(
        world.subject_features(np.full(world.IMAGE_SHAPE, -0.15)),
        np.zeros((2 * world.FEATURE_HALF + 1) ** 2 * 3),
    )


def test_manifest_digest_stable():
    d1 = world.manifest_digest()
    d2 = world.manifest_digest()
    assert d1 == d2
    assert len(d1) == 64


def test_write_manifest(tmp_path):
    import json

    path = tmp_path / "m.json"
    world.write_manifest(path)
    assert json.loads(path.read_text()) == world.manifest()


def test_subject_color_validation():
    with pytest.raises(ValueError):
        SubjectSpec(class_id="cup", shape="square", color=(-0.1, -0.1, -0.1))
