import numpy as np
import pytest

from despk.cyclegan import CycleGanConfig, DiscriminatorConfig, GeneratorConfig
from despk.synthetic import two_domain_corpus

TINY_GENERATOR = GeneratorConfig(in_kernel=3, in_channels=4, down_kernel=3, down_channels=(4, 4),
                                 res_blocks=1, res_kernel=3, up_kernel=3, up_channels=(4, 4),
                                 out_kernel=3)
TINY_DISCRIMINATOR = DiscriminatorConfig(channels=(2, 2, 2, 2), kernel=(3, 3),
                                         strides=((1, 1), (1, 2), (1, 2), (1, 1)), patch=(2, 2))


def tiny_config(**kw) -> CycleGanConfig:
    base = dict(crop_len=16, epochs=2, generator=TINY_GENERATOR, discriminator=TINY_DISCRIMINATOR)
    base.update(kw)
    return CycleGanConfig(**base)


@pytest.fixture(scope="session")
def small_corpus():
    xs, ys, _ = two_domain_corpus(3, 3, seed=5, n_frames=24)
    return xs, ys


@pytest.fixture
def rng():
    return np.random.default_rng(0)


TINY_CONFIG_TEXT = """\
[cyclegan]
crop_len = 16
epochs = 1

[generator]
in_kernel = 3
in_channels = 4
down_kernel = 3
down_channels = 4,4
res_blocks = 1
res_kernel = 3
up_kernel = 3
up_channels = 4,4
out_kernel = 3

[discriminator]
channels = 2,2,2,2
strides = 1x1,1x2,1x2,1x1
patch = 2,2
"""

TRANSCRIPTS = ["see anything out there", "think they should get rid of it", "hello world",
               "good morning everyone"]


def write_toy_corpus(root, n_per_domain=2, seed=0):
    """WAV files plus a manifest: laughter rows form domain X, normal rows domain Y."""
    from despk import vocoderfeat as vf
    from despk.evalkit import CorpusManifest, ManifestRow, write_manifest
    from despk.synthetic import vowel_waveform

    (root / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for domain, f0 in (("laughter", 230.0), ("normal", 140.0)):
        for i in range(n_per_domain):
            uid = f"{domain[:3]}{i:02d}"
            wav = vowel_waveform(rng, duration=0.4, f0=f0 * (1 + 0.05 * i))
            vf.write_wav(root / "wav" / f"{uid}.wav", wav)
            rows.append(ManifestRow(uid, f"wav/{uid}.wav", TRANSCRIPTS[i % len(TRANSCRIPTS)],
                                    domain, f"spk{i}", "f"))
    write_manifest(CorpusManifest(tuple(rows)), root / "manifest.tsv")
    (root / "tiny.ini").write_text(TINY_CONFIG_TEXT)
    return root / "manifest.tsv"
