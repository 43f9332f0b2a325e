"""
Walk a tiny feature buffer through slot reuse, one step at a time.

Six slots, ten nodes, no disk: loads are pure metadata here.
"""

import numpy as np

from featdrive.featbuf import FeatureBuffer

fb = FeatureBuffer(num_nodes=10, num_slots=6, row_bytes=4, check=True)


def show(title):
    print(f"-- {title}")
    print("   slot -> node :", fb.reverse.tolist())
    print("   standby (LRU first):", fb.standby.order().tolist())


# first batch: every node is missing, so this extractor claims all of them
first = np.array([1, 9, 8, 0, 7, 3])
acq = fb.acquire_for_batch(first)
print("to load:", first[acq.load_pos].tolist())
fb.bind_slots(first, fb.get_standby_slots(len(first)))

# node 8's read fails; its slot goes back to the front of the standby list
fb.abort_loads([8])
fb.publish_valid([1, 9, 0, 7, 3])
show("after the first batch")

# training is done with 8, 0 and 7; 1, 9 and 3 stay referenced
fb.release_batch([8, 0, 7])
show("after releasing 8, 0, 7")

# next batch overlaps: 7 is still valid in its old slot even with zero references
batch = np.array([7, 6, 1, 9, 5])
acq = fb.acquire_for_batch(batch)
print("hits:", batch[acq.alias >= 0].tolist(), " to load:", batch[acq.load_pos].tolist())

for node in batch[acq.load_pos]:
    slot = fb.get_standby_slot()
    old = fb.reverse[slot]
    print(f"node {node} takes slot {slot}" + (f", invalidating node {old}" if old >= 0 else ""))
    fb.bind_slot(node, slot)
fb.publish_valid(batch[acq.load_pos])

print("alias list:", fb.slots_of(batch).tolist())
show("after the second batch")

fb.release_batch([3])
show("after releasing 3 (its slot joins the tail, still valid)")
print("entry for node 3 (slot, refs, valid):", fb.entry(3))
print(fb.stats())
