# coding: utf-8

# # Scoring hallucinated faces
#
# Briefly train a generator, then score it with PSNR and SSIM against
# bilinear, and sweep thresholds for pair verification.

# In[1]:

import tempfile
from pathlib import Path

from fhgan.config import desk_config
from fhgan.data import FaceDataset, make_verification_pairs, synth_toy_dataset, upsample_bilinear
from fhgan.engine import Trainer
from fhgan.metrics import evaluate_sr, verification_accuracy

workdir = Path(tempfile.mkdtemp())
manifest, records = synth_toy_dataset(workdir / "toy", 4, 4, seed=0, holdout_per_identity=1)
train, test = FaceDataset(records, "train"), FaceDataset(records, "test")


# In[2]:

trainer = Trainer(desk_config(steps=100), train.num_classes)
trainer.run("fr_pretrain", train)
log = trainer.run("gan_pretrain", train)
print(log[0]["pixel"], log[-1]["pixel"])


# In[3]:

pairs = [test[i] for i in range(len(test))]
verification = make_verification_pairs(records, 12, seed=0)
model = evaluate_sr(trainer.generator, trainer.recognizer, pairs, verification, name="model")
bilinear = evaluate_sr(upsample_bilinear, trainer.recognizer, pairs, verification, name="bilinear")
print(model.summary())
print(bilinear.summary())


# Threshold sweeps pick the best cut over every distinct score:

# In[4]:

print(verification_accuracy([(0.9, True), (0.8, True), (0.3, False), (0.85, False)]))
