#pragma once

#include <optional>
#include <string>
#include <vector>

#include "blobdiff/encoders.hpp"
#include "blobdiff/rng.hpp"
#include "blobdiff/tensor.hpp"
#include "blobdiff/world2d.hpp"
#include "blobdiff/world3d.hpp"

namespace blobdiff {

// On-disk layout (a stability contract):
//   root/manifest.json                  world kind, fps, frame size, clip list
//   root/<clip>/frames.bin              one tensor "frames" [F,3,h,w] in [-1,1]
//   root/<clip>/meta.json               identity, articulation signal, mouth
//                                       regions, 2-D head poses
//   root/<clip>/poses.jsonl             multiview only: one record per frame
//                                       with 16 extrinsic + 9 intrinsic values
//                                       plus azimuth/elevation/distance
struct ClipData {
  std::string name;
  Tensor frames;                  // [F,3,h,w]
  BlobIdentity identity;
  std::vector<double> signal;     // empty for the multiview world
  Tensor mouth_regions;           // [F,4]; empty tensor for multiview
  std::vector<BlobPose2D> head_poses;  // empty for multiview
  std::vector<CameraPose> poses;  // empty for the talking world
  std::vector<double> azimuth_deg, elevation_deg;
};

struct DatasetInfo {
  std::string world;  // "talking2d" or "multiview3d"
  int fps = 30;
  int height = 0, width = 0;
  std::vector<std::string> clip_names;
  std::vector<int> clip_frames;
};

void write_dataset(const std::string& root, const DatasetInfo& info,
                   const std::vector<ClipData>& clips);

// A context+segment training window: the first n frames are clean context,
// the remaining N are the denoising target segment.
struct ClipWindow {
  int clip_index = 0;
  int start = 0;  // first frame index within the clip
  int n = 0;      // context frames
  Tensor frames;  // [n+N, 3, h, w]
  Tensor id_embedding;
  std::vector<double> signal;          // length n+N (empty for multiview)
  Tensor mouth_regions;                // [n+N, 4] (empty for multiview)
  std::optional<Tensor> camera_flat;   // [n+N, 25] (multiview only)
};

class DatasetReader {
 public:
  explicit DatasetReader(const std::string& root);

  const DatasetInfo& info() const { return info_; }
  int clip_count() const { return static_cast<int>(info_.clip_names.size()); }
  ClipData load_clip(int index) const;

  // Uniformly random clip and offset; refuses when no clip holds N+n frames.
  ClipWindow sample_window(Rng& rng, int N = 16, int n = 2) const;
  // Deterministic variant used for held-out evaluation sets.
  ClipWindow window_at(int clip_index, int start, int N = 16, int n = 2) const;

 private:
  std::string root_;
  DatasetInfo info_;
};

// Procedural generators behind the data CLI.
void generate_talking_dataset(const std::string& root, int num_clips, int frames_per_clip,
                              int h, int w, uint64_t seed);
void generate_multiview_dataset(const std::string& root, int num_clips,
                                const TrajectorySpec& spec, int h, int w, uint64_t seed);

}  // namespace blobdiff
