"""
Two-modality spine phantoms
===========================

Generates a handful of synthetic lumbar-spine volumes and shows the same
slices in the source modality (A) and the target modality (B), with the
disc masks and the image-level tags used to override the class-ratio prior.
"""

import matplotlib.pyplot as plt
import numpy as np

from srda.data_synth import generate_phantoms, phantom_summary

volumes = generate_phantoms(seed=0, n_volumes=4)
print(phantom_summary(volumes))

# one mid slice per volume
fig, axes = plt.subplots(3, len(volumes), figsize=(2.2 * len(volumes), 6.6))
for col, vol in enumerate(volumes):
    z = int(np.argmax(vol.mask.reshape(len(vol.mask), -1).sum(1)))
    axes[0, col].imshow(vol.image("A")[z], cmap="gray", vmin=0, vmax=1)
    axes[0, col].set_title(f"{vol.volume_id} A", fontsize=8)
    axes[1, col].imshow(vol.image("B")[z], cmap="gray", vmin=0, vmax=1)
    axes[1, col].set_title("B", fontsize=8)
    axes[2, col].imshow(vol.mask[z], cmap="gray")
    axes[2, col].set_title(f"mask, {vol.tags.sum()}/{len(vol.tags)} slices tagged", fontsize=8)
for ax in axes.ravel():
    ax.axis("off")
fig.tight_layout()
fig.savefig("phantoms.png", dpi=100)
print("wrote phantoms.png")
