# coding: utf-8

# # Identity loss on and off
#
# Pretrain a toy recognizer and generator, then run joint training twice from
# the same state: once with a large identity weight and once without it.
# Distances are measured on held-out images by a frozen copy of the
# pretrained recognizer. Roughly a minute per seed.

# In[1]:

import tempfile

from fhgan.experiments import identity_ablation

workdir = tempfile.mkdtemp()


# In[2]:

results = [identity_ablation(workdir, seed, identity_weight=1000.0) for seed in (0, 1, 2)]
for r in results:
    print(r.seed, round(r.distance_with_identity, 4), round(r.distance_without_identity, 4), r.identity_helps)
