# coding: utf-8

# # Does the small generator beat bilinear?
#
# Train the desk-sized generator on eight synthetic faces with the pixel loss
# only, then compare PSNR with plain bilinear upsampling. Takes a few minutes
# on one core.

# In[1]:

import tempfile

import numpy as np
import torch

from fhgan.experiments import convergence_run

torch.set_num_threads(1)
workdir = tempfile.mkdtemp()


# In[2]:

res = convergence_run(workdir, steps=500, seed=0)
print("model    %.2f dB" % res.model_psnr)
print("bilinear %.2f dB" % res.bilinear_psnr)


# The pixel loss every 50 steps:

# In[3]:

pixel = np.array([r["pixel"] for r in res.log])
print(np.round(pixel[::50], 5))
