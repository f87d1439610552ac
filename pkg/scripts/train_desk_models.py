"""Train (or reuse from $CACGAN_CACHE) the three desk-scale models and print held-out metrics."""

import argparse
import json
import logging

import numpy as np

from cacgan import experiments as ex
from cacgan.cacslice import classify_slices
from cacgan.calgan import predict_maps
from cacgan.heartseg import seg_metrics, segment_heart
from cacgan.volume import SEG_SPACING, BinaryMask, resample


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    from dataclasses import replace

    hs = ex.heartseg_checkpoint(replace(ex.DESK_HEARTSEG, seed=a.seed))
    cl = ex.classifier_checkpoint(replace(ex.DESK_CLASSIFIER, seed=a.seed))
    gan = ex.cyclegan_checkpoint(replace(ex.DESK_GAN, seed=a.seed))

    model = ex.load(hs, "heartseg")
    dice = []
    for v, m in ex.heartseg_dataset(ex.HELDOUT_SEEDS):
        vs, ms = resample(v, SEG_SPACING), resample(m, SEG_SPACING, "nearest")
        dice.append(seg_metrics(segment_heart(model, vs, ex.DESK_HEARTSEG), BinaryMask(ms.data != 0, ms.spacing))[0])
    test = ex.classifier_dataset(ex.TEST_SLICE_SEEDS, ex.DESK_CLASSIFIER.side)
    y = np.array([f for _, f in test])
    pred = np.array(classify_slices(ex.load(cl, "classifier"), [s for s, _ in test]))
    maps = predict_maps(ex.load(gan, "g_r"), [s for s, f in test if not f])
    print(json.dumps({
        "checkpoints": {"heartseg": str(hs), "classifier": str(cl), "cyclegan": str(gan)},
        "heartseg_dice_min": float(min(dice)), "heartseg_dice_median": float(np.median(dice)),
        "classifier_accuracy": float((pred == y).mean()), "classifier_fpr": float((pred & ~y).sum() / (~y).sum()),
        "identity_mean_abs": float(np.abs(maps).mean()),
    }, indent=1))


if __name__ == "__main__":
    main()
