#include "blobdiff/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "blobdiff/serialize.hpp"

namespace blobdiff {

namespace fs = std::filesystem;

namespace {

json identity_to_json(const BlobIdentity& id) {
  return json{{"color", {id.color_r, id.color_g, id.color_b}},
              {"radius", id.radius},
              {"eye_offset", id.eye_offset},
              {"eye_size", id.eye_size},
              {"mouth_width", id.mouth_width},
              {"embedding", id.embedding.data}};
}

BlobIdentity identity_from_json(const json& j) {
  BlobIdentity id;
  id.color_r = j.at("color").at(0).get<double>();
  id.color_g = j.at("color").at(1).get<double>();
  id.color_b = j.at("color").at(2).get<double>();
  id.radius = j.at("radius").get<double>();
  id.eye_offset = j.at("eye_offset").get<double>();
  id.eye_size = j.at("eye_size").get<double>();
  id.mouth_width = j.at("mouth_width").get<double>();
  std::vector<double> emb = j.at("embedding").get<std::vector<double>>();
  const int d = static_cast<int>(emb.size());
  id.embedding = Tensor({d}, std::move(emb));
  return id;
}

Tensor rows_to_tensor(const json& rows, int cols) {
  Tensor t({static_cast<int>(rows.size()), cols});
  for (size_t r = 0; r < rows.size(); ++r)
    for (int c = 0; c < cols; ++c)
      t.at(static_cast<int>(r), c) = rows.at(r).at(static_cast<size_t>(c)).get<double>();
  return t;
}

}  // namespace

void write_dataset(const std::string& root, const DatasetInfo& info,
                   const std::vector<ClipData>& clips) {
  if (info.clip_names.size() != clips.size() || info.clip_frames.size() != clips.size())
    throw std::invalid_argument("write_dataset: manifest/clip list mismatch");
  fs::create_directories(root);
  for (size_t i = 0; i < clips.size(); ++i) {
    const ClipData& clip = clips[i];
    if (clip.frames.rank() != 4 || clip.frames.shape[0] != info.clip_frames[i] ||
        clip.frames.shape[1] != 3 || clip.frames.shape[2] != info.height ||
        clip.frames.shape[3] != info.width)
      throw std::invalid_argument("write_dataset: frame tensor shape disagrees with manifest");
    fs::path dir = fs::path(root) / clip.name;
    fs::create_directories(dir);
    save_tensors((dir / "frames.bin").string(), {{"frames", clip.frames}},
                 json{{"clip", clip.name}});

    json meta;
    meta["identity"] = identity_to_json(clip.identity);
    meta["signal"] = clip.signal;
    if (clip.mouth_regions.numel() > 0) {
      json rows = json::array();
      for (int f = 0; f < clip.mouth_regions.shape[0]; ++f)
        rows.push_back({clip.mouth_regions.at(f, 0), clip.mouth_regions.at(f, 1),
                        clip.mouth_regions.at(f, 2), clip.mouth_regions.at(f, 3)});
      meta["mouth_regions"] = rows;
    }
    if (!clip.head_poses.empty()) {
      json rows = json::array();
      for (const auto& p : clip.head_poses) rows.push_back({p.cx, p.cy, p.rot});
      meta["head_poses"] = rows;
    }
    save_json((dir / "meta.json").string(), meta);

    if (!clip.poses.empty()) {
      if (clip.poses.size() != static_cast<size_t>(clip.frames.shape[0]))
        throw std::invalid_argument("write_dataset: pose count != frame count");
      std::ofstream out(dir / "poses.jsonl");
      for (size_t f = 0; f < clip.poses.size(); ++f) {
        Tensor flat = flatten_camera(clip.poses[f]);
        json rec;
        rec["frame"] = f;
        rec["E"] = std::vector<double>(flat.data.begin(), flat.data.begin() + 16);
        rec["K"] = std::vector<double>(flat.data.begin() + 16, flat.data.end());
        rec["azimuth"] = clip.azimuth_deg.at(f);
        rec["elevation"] = clip.elevation_deg.at(f);
        rec["distance"] = 2.7;
        out << rec.dump() << "\n";
      }
    }
  }
  json manifest;
  manifest["format"] = "blobdiff-dataset-v1";
  manifest["world"] = info.world;
  manifest["fps"] = info.fps;
  manifest["height"] = info.height;
  manifest["width"] = info.width;
  json clist = json::array();
  for (size_t i = 0; i < info.clip_names.size(); ++i)
    clist.push_back({{"name", info.clip_names[i]}, {"frames", info.clip_frames[i]}});
  manifest["clips"] = clist;
  save_json((fs::path(root) / "manifest.json").string(), manifest);
}

DatasetReader::DatasetReader(const std::string& root) : root_(root) {
  json manifest = load_json((fs::path(root) / "manifest.json").string());
  if (manifest.at("format").get<std::string>() != "blobdiff-dataset-v1")
    throw std::runtime_error("DatasetReader: unknown dataset format");
  info_.world = manifest.at("world").get<std::string>();
  info_.fps = manifest.at("fps").get<int>();
  info_.height = manifest.at("height").get<int>();
  info_.width = manifest.at("width").get<int>();
  for (const auto& c : manifest.at("clips")) {
    info_.clip_names.push_back(c.at("name").get<std::string>());
    info_.clip_frames.push_back(c.at("frames").get<int>());
  }
}

ClipData DatasetReader::load_clip(int index) const {
  if (index < 0 || index >= clip_count())
    throw std::out_of_range("DatasetReader: clip index");
  ClipData clip;
  clip.name = info_.clip_names[static_cast<size_t>(index)];
  fs::path dir = fs::path(root_) / clip.name;

  TensorMap tensors = load_tensors((dir / "frames.bin").string());
  auto it = tensors.find("frames");
  if (it == tensors.end()) throw std::runtime_error("DatasetReader: frames tensor missing");
  clip.frames = std::move(it->second);
  if (clip.frames.shape[0] != info_.clip_frames[static_cast<size_t>(index)])
    throw std::runtime_error("DatasetReader: manifest frame count mismatch for " + clip.name);

  json meta = load_json((dir / "meta.json").string());
  clip.identity = identity_from_json(meta.at("identity"));
  clip.signal = meta.at("signal").get<std::vector<double>>();
  if (meta.contains("mouth_regions")) clip.mouth_regions = rows_to_tensor(meta["mouth_regions"], 4);
  if (meta.contains("head_poses"))
    for (const auto& row : meta["head_poses"])
      clip.head_poses.push_back({row.at(0).get<double>(), row.at(1).get<double>(),
                                 row.at(2).get<double>()});

  fs::path posefile = dir / "poses.jsonl";
  if (fs::exists(posefile)) {
    std::ifstream in(posefile);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json rec = json::parse(line);
      std::vector<double> vals = rec.at("E").get<std::vector<double>>();
      std::vector<double> kv = rec.at("K").get<std::vector<double>>();
      vals.insert(vals.end(), kv.begin(), kv.end());
      clip.poses.push_back(unflatten_camera(Tensor({25}, std::move(vals))));
      clip.azimuth_deg.push_back(rec.at("azimuth").get<double>());
      clip.elevation_deg.push_back(rec.at("elevation").get<double>());
    }
    if (clip.poses.size() != static_cast<size_t>(clip.frames.shape[0]))
      throw std::runtime_error("DatasetReader: pose sidecar count mismatch for " + clip.name);
  }
  return clip;
}

ClipWindow DatasetReader::window_at(int clip_index, int start, int N, int n) const {
  if (N < 1 || n < 0) throw std::invalid_argument("window_at: bad N/n");
  ClipData clip = load_clip(clip_index);
  const int len = N + n;
  const int F = clip.frames.shape[0];
  if (F < len)
    throw std::invalid_argument("window_at: clip shorter than N+n frames");
  if (start < 0 || start + len > F) throw std::out_of_range("window_at: window range");

  ClipWindow w;
  w.clip_index = clip_index;
  w.start = start;
  w.n = n;
  const int h = clip.frames.shape[2], wd = clip.frames.shape[3];
  w.frames = Tensor({len, 3, h, wd});
  const size_t per = static_cast<size_t>(3) * h * wd;
  std::copy_n(clip.frames.data.begin() + static_cast<size_t>(start) * per,
              static_cast<size_t>(len) * per, w.frames.data.begin());
  w.id_embedding = clip.identity.embedding;
  if (!clip.signal.empty())
    w.signal.assign(clip.signal.begin() + start, clip.signal.begin() + start + len);
  if (clip.mouth_regions.numel() > 0) {
    w.mouth_regions = Tensor({len, 4});
    std::copy_n(clip.mouth_regions.data.begin() + static_cast<size_t>(start) * 4,
                static_cast<size_t>(len) * 4, w.mouth_regions.data.begin());
  }
  if (!clip.poses.empty()) {
    Tensor cams({len, 25});
    for (int f = 0; f < len; ++f) {
      Tensor flat = flatten_camera(clip.poses[static_cast<size_t>(start + f)]);
      for (int i = 0; i < 25; ++i) cams.at(f, i) = flat[i];
    }
    w.camera_flat = std::move(cams);
  }
  return w;
}

ClipWindow DatasetReader::sample_window(Rng& rng, int N, int n) const {
  const int len = N + n;
  std::vector<int> eligible;
  for (int i = 0; i < clip_count(); ++i)
    if (info_.clip_frames[static_cast<size_t>(i)] >= len) eligible.push_back(i);
  if (eligible.empty())
    throw std::runtime_error("sample_window: no clip holds N+n=" + std::to_string(len) +
                             " frames");
  int clip = eligible[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(eligible.size()) - 1))];
  int start = rng.uniform_int(0, info_.clip_frames[static_cast<size_t>(clip)] - len);
  return window_at(clip, start, N, n);
}

void generate_talking_dataset(const std::string& root, int num_clips, int frames_per_clip,
                              int h, int w, uint64_t seed) {
  if (num_clips < 1 || frames_per_clip < 1)
    throw std::invalid_argument("generate_talking_dataset: bad sizes");
  Rng rng(seed);
  DatasetInfo info;
  info.world = "talking2d";
  info.fps = 30;
  info.height = h;
  info.width = w;
  std::vector<ClipData> clips;
  for (int i = 0; i < num_clips; ++i) {
    Rng crng = rng.child("clip", static_cast<uint64_t>(i));
    ClipData clip;
    char name[32];
    std::snprintf(name, sizeof(name), "clip%04d", i);
    clip.name = name;
    clip.identity = sample_identity(crng);
    clip.signal = synth_articulation(frames_per_clip, crng, info.fps);
    clip.head_poses = synth_head_poses(frames_per_clip, h, w,
                                       clip.identity.radius * std::min(h, w), crng, info.fps);
    RenderedClip rendered =
        render_talking_blob(clip.identity, clip.signal, clip.head_poses, h, w);
    clip.frames = std::move(rendered.frames);
    clip.mouth_regions = std::move(rendered.mouth_regions);
    info.clip_names.push_back(clip.name);
    info.clip_frames.push_back(frames_per_clip);
    clips.push_back(std::move(clip));
  }
  write_dataset(root, info, clips);
}

void generate_multiview_dataset(const std::string& root, int num_clips,
                                const TrajectorySpec& spec, int h, int w, uint64_t seed) {
  if (num_clips < 1) throw std::invalid_argument("generate_multiview_dataset: bad sizes");
  validate_trajectory_spec(spec);
  Rng rng(seed);
  DatasetInfo info;
  info.world = "multiview3d";
  info.fps = spec.fps;
  info.height = h;
  info.width = w;
  std::vector<ClipData> clips;
  for (int i = 0; i < num_clips; ++i) {
    Rng crng = rng.child("clip", static_cast<uint64_t>(i));
    ClipData clip;
    char name[32];
    std::snprintf(name, sizeof(name), "clip%04d", i);
    clip.name = name;
    clip.identity = sample_identity(crng);
    clip.poses = sample_trajectory(spec, crng, h, w);
    for (const auto& p : clip.poses) {
      OrbitAngles a = pose_angles(p);
      clip.azimuth_deg.push_back(a.azimuth_deg);
      clip.elevation_deg.push_back(a.elevation_deg);
    }
    clip.frames = render_multiview(clip.identity, clip.poses, h, w);
    info.clip_names.push_back(clip.name);
    info.clip_frames.push_back(clip.frames.shape[0]);
    clips.push_back(std::move(clip));
  }
  write_dataset(root, info, clips);
}

}  // namespace blobdiff
