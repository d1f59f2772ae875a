#pragma once

#include <vector>

#include "blobdiff/rng.hpp"
#include "blobdiff/tensor.hpp"

namespace blobdiff {

// Appearance parameters of a 2-D talking blob, each drawn from the declared
// range, plus the derived unit-norm identity embedding (fixed random
// projection of the normalized parameters with small per-sample jitter).
struct BlobIdentity {
  double color_r = 0, color_g = 0, color_b = 0;  // body color, each in [0.2, 0.9]
  double radius = 0;       // body radius as a fraction of min(h,w), [0.25, 0.38]
  double eye_offset = 0;   // lateral eye offset as a fraction of radius, [0.35, 0.5]
  double eye_size = 0;     // eye radius as a fraction of radius, [0.06, 0.12]
  double mouth_width = 0;  // mouth half-width as a fraction of radius, [0.35, 0.6]
  Tensor embedding;        // [d_id], unit norm
};

// The seven appearance parameters normalized to [0,1] by their ranges.
Tensor identity_param_vector(const BlobIdentity& id);

BlobIdentity sample_identity(Rng& rng, int d_id = 8);

// Per-frame mouth aperture in [0,1]: a sum of 2-4 random sinusoids
// (0.5-4 Hz at the given fps) through a smooth squashing map, with an
// occasional (p = 0.2) silent stretch pulling the aperture below 0.1.
std::vector<double> synth_articulation(int frames, Rng& rng, int fps = 30);

// 2-D head pose: blob center in pixels plus in-plane rotation (radians).
struct BlobPose2D {
  double cx = 0, cy = 0, rot = 0;
};

// Smooth small oscillations around the frame center; guaranteed to keep the
// blob of the given pixel radius fully inside an h x w frame.
std::vector<BlobPose2D> synth_head_poses(int frames, int h, int w, double radius_px, Rng& rng,
                                         int fps = 30);

struct RenderedClip {
  Tensor frames;         // [F,3,h,w], values in [-1,1]
  Tensor mouth_regions;  // [F,4]: mouth center x, y and the fixed crop
                         // half-extents (half-width, max half-height), pixels
};

// Anti-aliased rasterization: body disc, two eyes, and a mouth ellipse whose
// half-height is aperture * 0.3 * radius, all moved/rotated by the per-frame
// pose. Aperture 0 leaves the mouth region at body color. Throws if any pose
// puts the blob outside the frame.
RenderedClip render_talking_blob(const BlobIdentity& id, const std::vector<double>& aperture,
                                 const std::vector<BlobPose2D>& poses, int h, int w);

// Pixel-statistic aperture oracle: negated mean luminance of the mouth crop
// of frame f. Affinely related to the aperture, so Pearson correlation
// against the driving signal is the lip-sync ground truth.
double mouth_darkness(const Tensor& frames, int f, const Tensor& mouth_regions);

}  // namespace blobdiff
