"""Pretrain the image encoder with InfoNCE on renders of randomized rooms.

Images come from random free-space viewpoints across several obstacle
layouts. Each batch pairs two augmented views (crop, flip, blur) of every
image; the loss pulls a pair together against the other images in the batch.
Separation is the gap between positive-pair and negative-pair cosine
similarity on held-out images.

    python demos/03_contrastive_pretraining.py --images 2200 --epochs 20
"""

import argparse
import time

from splatnav.contrast import EncoderSpec, pretrain, separation
from splatnav.render import RenderConfig
from splatnav.world import collect_dataset, default_template

ap = argparse.ArgumentParser()
ap.add_argument("--images", type=int, default=600)
ap.add_argument("--holdout", type=int, default=100)
ap.add_argument("--epochs", type=int, default=5)
ap.add_argument("--batch", type=int, default=128)
ap.add_argument("--save", default=None, help="write the encoder checkpoint here")
args = ap.parse_args()

t0 = time.time()
images, poses = collect_dataset(default_template(3), args.images, seed=0, n_layouts=10,
                                render_cfg=RenderConfig(background_color=(0.55, 0.65, 0.8)))
print(f"rendered {len(images)} images in {time.time() - t0:.0f} s")

train_imgs, held = images[:-args.holdout], images[-args.holdout:]
enc, _ = pretrain(train_imgs, EncoderSpec(), epochs=0, batch=args.batch)
pos, neg = separation(enc, held, seed=1)
print(f"untrained encoder: positive {pos:.3f}, negative {neg:.3f}")

t0 = time.time()
enc, report = pretrain(train_imgs, EncoderSpec(), epochs=args.epochs, batch=args.batch, seed=0)
print("epoch losses:", " ".join(f"{x:.3f}" for x in report.epoch_losses), f"({time.time() - t0:.0f} s)")
pos, neg = separation(enc, held, seed=1)
print(f"trained encoder:   positive {pos:.3f}, negative {neg:.3f}, margin {pos - neg:.3f}")
if args.save:
    enc.save(args.save)
