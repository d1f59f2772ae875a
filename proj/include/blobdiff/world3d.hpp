#pragma once

#include <vector>

#include "blobdiff/encoders.hpp"
#include "blobdiff/rng.hpp"
#include "blobdiff/tensor.hpp"
#include "blobdiff/world2d.hpp"

namespace blobdiff {

// Camera trajectory contract for the pseudo multi-view world: smooth random
// oscillations inside +-70 degrees azimuth and +-35 degrees elevation around
// frontal, at a fixed orbit distance of 2.7.
struct TrajectorySpec {
  double azimuth_span = 70.0;    // degrees, absolute bound on |azimuth|
  double elevation_span = 35.0;  // degrees
  double distance = 2.7;
  double duration_s = 5.0;
  int fps = 30;
};

void validate_trajectory_spec(const TrajectorySpec& spec);

// Orbit camera looking at the origin: +y is world up, the camera y axis
// points down (image rows grow downward), azimuth rotates around +y.
CameraPose orbit_pose(double azimuth_deg, double elevation_deg, double distance, int h, int w);

// Azimuth/elevation/distance back out of an orbit extrinsics matrix.
struct OrbitAngles {
  double azimuth_deg = 0, elevation_deg = 0, distance = 0;
};
OrbitAngles pose_angles(const CameraPose& pose);

// Smoothed random oscillations inside the spans; duration*fps poses, per-step
// angular change bounded by the oscillator frequency cap (under 3 degrees).
std::vector<CameraPose> sample_trajectory(const TrajectorySpec& spec, Rng& rng, int h, int w);

// Pinhole render of a 3-D blob: body sphere, two eye spheres, a nose sphere
// on the gaze axis, and one ear sphere on the +x side breaking left/right
// symmetry. Painter's order by center depth. Frames [F,3,h,w] in [-1,1].
Tensor render_multiview(const BlobIdentity& id, const std::vector<CameraPose>& poses, int h,
                        int w);

// Viewpoint oracle: recovers the camera azimuth from one rendered frame by
// locating the nose-sphere centroid and inverting the closed-form projection.
// Needs the render's intrinsics, orbit distance/elevation and body color.
double recover_azimuth(const Tensor& frame, const Tensor& Kmat, double distance,
                       double elevation_deg, const double body_color[3]);

}  // namespace blobdiff
