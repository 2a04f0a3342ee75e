# coding: utf-8

# # Sparse aggregation, layer by layer
#
# A block layer does not read every earlier output. It reads the ones at
# offsets 1, 2, 4, 8, ... behind it. This notebook prints those sets and
# counts what they cost in kernel parameters.

# In[1]:

from fhgan.topology import (BlockSpec, NetworkSpec, build_plan, depth_accounting,
                            parameter_count, topology_report)


# In[2]:

plan = build_plan(8)
for l in range(1, 9):
    print(l, plan[l])


# Base 3 is sparser still:

# In[3]:

print(build_plan(10, c=3).predecessors)


# Kernel parameters of one default block (6 layers, growth rate 32, 64 input channels):

# In[4]:

sparse = parameter_count(BlockSpec(), "sparse")
dense = parameter_count(BlockSpec(), "dense")
print(sparse, dense, round(sparse / dense, 3))


# The saving grows with the number of blocks.

# In[5]:

for b in range(1, 7):
    spec = NetworkSpec(num_blocks=b)
    print(b, parameter_count(spec, "sparse"), parameter_count(spec, "dense"), depth_accounting(spec))


# In[6]:

print(topology_report(NetworkSpec()))
