"""Small end-to-end run through the library API.

Generates a synthetic corpus, pretrains the tiny network on nightlight
intensity, freezes it, and fits the income head with grouped 5-fold CV.
Takes well under a minute on one core.

    python demos/end_to_end.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from gafm.datapipe import build_manifest
from gafm.model import GafmConfig, GafmNetwork, Vnn, to_feature_extractor
from gafm.synth import synth_generate
from gafm.training import TrainConfig, train_phase1, train_phase2


def main(workdir: Path) -> None:
    corpus = synth_generate(workdir / "corpus", n_clusters=60, images_per_cluster=2, image_size=16, seed=0)
    manifest = build_manifest(corpus.survey_csv, corpus.clusters_csv, corpus.raster_file, corpus.image_dir, seed=0)
    print(f"manifest: {len(manifest.entries)} images")

    net = GafmNetwork(GafmConfig.tiny(), seed=0)
    report = train_phase1(net, manifest, TrainConfig(epochs=40, batch_size=16))
    print(f"phase 1: held-out R2 {report.metrics['val_r2']:.3f} (best epoch {report.best_epoch})")

    # the extractor shares the trained weights; only the VNN learns from here on
    extractor = to_feature_extractor(net)
    vnn = Vnn(extractor.feature_dim, (32, 16), seed=0)
    result = train_phase2(extractor, vnn, manifest, TrainConfig(epochs=40, batch_size=16))
    print("phase 2 per-fold R2:", np.round(result.fold_r2, 3).tolist())
    print(f"phase 2 mean R2 {result.mean_r2:.3f}, pooled R2 {result.pooled_r2:.3f}")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(Path(tmp))
