#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "srb/encoder.hpp"
#include "srb/tensor.hpp"

namespace srb {

enum class Task { Classification, Segmentation, Depth };

inline Task parse_task(const std::string& s) {
  if (s == "classification") return Task::Classification;
  if (s == "segmentation") return Task::Segmentation;
  if (s == "depth") return Task::Depth;
  throw InvalidInputError("task must be classification|segmentation|depth, got '" + s + "'");
}

inline std::string task_name(Task t) {
  switch (t) {
    case Task::Classification: return "classification";
    case Task::Segmentation: return "segmentation";
    case Task::Depth: return "depth";
  }
  throw ContractError("unreachable task");
}

inline constexpr int64_t kIgnoreIndex = 255;

// One example; unused annotation tensors stay empty.
struct Sample {
  Tensor image;        // [C,H,W], values in [0,1]
  int64_t label = -1;  // class id for classification
  Tensor mask;         // [H,W] integer class ids stored as reals, 255 = ignore
  Tensor depth;        // [H,W] meters, 0 marks invalid pixels

  Sample() : image(Shape{kImageChannels, 0, 0}), mask(Shape{0, 0}), depth(Shape{0, 0}) {}
};

struct Dataset {
  std::vector<Sample> samples;
  int64_t num_classes = 0;      // classification label count
  int64_t num_seg_classes = 0;  // segmentation classes including background

  int64_t size() const { return static_cast<int64_t>(samples.size()); }
  bool empty() const { return samples.empty(); }
};

inline ImageBatch stack_images(const std::vector<Sample>& samples) {
  if (samples.empty()) throw InvalidInputError("cannot stack an empty sample list");
  const Tensor& first = samples.front().image;
  const int64_t C = first.dim(0), H = first.dim(1), W = first.dim(2);
  Tensor out({static_cast<int64_t>(samples.size()), C, H, W});
  for (size_t b = 0; b < samples.size(); ++b) {
    const Tensor& img = samples[b].image;
    if (!img.same_shape(first)) throw InvalidInputError("stacked images must share one shape");
    std::copy(img.data(), img.data() + img.numel(), out.data() + b * img.numel());
  }
  return ImageBatch(out);
}

inline ImageBatch stack_images(const Dataset& ds, const std::vector<int64_t>& idx) {
  if (idx.empty()) throw InvalidInputError("cannot stack an empty index list");
  std::vector<Sample> picked;
  picked.reserve(idx.size());
  for (int64_t i : idx) picked.push_back(ds.samples.at(i));
  return stack_images(picked);
}

inline std::vector<int64_t> gather_labels(const Dataset& ds, const std::vector<int64_t>& idx) {
  std::vector<int64_t> out;
  out.reserve(idx.size());
  for (int64_t i : idx) out.push_back(ds.samples.at(i).label);
  return out;
}

namespace detail {
inline Tensor stack_maps(const Dataset& ds, const std::vector<int64_t>& idx, bool use_mask) {
  if (idx.empty()) throw InvalidInputError("cannot stack an empty index list");
  const Tensor& first = use_mask ? ds.samples.at(idx[0]).mask : ds.samples.at(idx[0]).depth;
  if (first.numel() == 0) throw InvalidInputError("samples lack the requested annotation map");
  Tensor out({static_cast<int64_t>(idx.size()), first.dim(0), first.dim(1)});
  for (size_t b = 0; b < idx.size(); ++b) {
    const Tensor& m = use_mask ? ds.samples.at(idx[b]).mask : ds.samples.at(idx[b]).depth;
    if (!m.same_shape(first)) throw InvalidInputError("stacked maps must share one shape");
    std::copy(m.data(), m.data() + m.numel(), out.data() + b * m.numel());
  }
  return out;
}
}  // namespace detail

inline Tensor stack_masks(const Dataset& ds, const std::vector<int64_t>& idx) {
  return detail::stack_maps(ds, idx, true);
}
inline Tensor stack_depths(const Dataset& ds, const std::vector<int64_t>& idx) {
  return detail::stack_maps(ds, idx, false);
}

inline std::vector<int64_t> all_indices(const Dataset& ds) {
  std::vector<int64_t> idx(ds.size());
  for (int64_t i = 0; i < ds.size(); ++i) idx[i] = i;
  return idx;
}

// Deterministic shuffle-and-cut split; second element holds the test fraction.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, Real test_fraction,
                                                 uint64_t seed) {
  if (ds.empty()) throw InvalidInputError("cannot split an empty dataset");
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw InvalidInputError("test fraction must lie strictly between 0 and 1");
  Rng rng(splitmix64(seed ^ 0x73706c6974ULL));
  auto perm = rng.permutation(ds.size());
  int64_t n_test = std::max<int64_t>(1, static_cast<int64_t>(ds.size() * test_fraction));
  n_test = std::min(n_test, ds.size() - 1);
  Dataset train, test;
  train.num_classes = test.num_classes = ds.num_classes;
  train.num_seg_classes = test.num_seg_classes = ds.num_seg_classes;
  for (int64_t i = 0; i < ds.size(); ++i) {
    (i < n_test ? test : train).samples.push_back(ds.samples[perm[i]]);
  }
  return {train, test};
}

// ---------------------------------------------------------------------------
// image file formats: binary PPM (P6) for images, binary PGM (P5) for masks
// and depth maps (16-bit depth in millimeters)
// ---------------------------------------------------------------------------

namespace detail {
inline void skip_pnm_whitespace(std::istream& is) {
  while (true) {
    int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      return;
    }
  }
}
inline int64_t read_pnm_int(std::istream& is) {
  skip_pnm_whitespace(is);
  int64_t v;
  if (!(is >> v)) throw IoError("malformed image header");
  return v;
}
}  // namespace detail

inline void write_ppm(const std::string& path, const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw InvalidInputError("ppm image must be [3,H,W]");
  const int64_t H = img.dim(1), W = img.dim(2);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << "P6\n" << W << " " << H << "\n255\n";
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        Real v = std::min(1.0, std::max(0.0, img.at(c, y, x)));
        os.put(static_cast<char>(std::lround(v * 255.0)));
      }
  if (!os) throw IoError("write to '" + path + "' failed");
}

inline Tensor read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("image '" + path + "' not found");
  std::string magic;
  is >> magic;
  if (magic != "P6") throw IoError("'" + path + "' is not a binary PPM");
  int64_t W = detail::read_pnm_int(is);
  int64_t H = detail::read_pnm_int(is);
  int64_t maxval = detail::read_pnm_int(is);
  if (maxval <= 0 || maxval > 255) throw IoError("unsupported PPM maxval");
  is.get();  // single whitespace after header
  Tensor img({3, H, W});
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        int b = is.get();
        if (b < 0) throw IoError("'" + path + "' truncated");
        img.at(c, y, x) = static_cast<Real>(b) / static_cast<Real>(maxval);
      }
  return img;
}

// scale converts map values to integers: stored = round(value * scale)
inline void write_pgm16(const std::string& path, const Tensor& map, Real scale) {
  if (map.rank() != 2) throw InvalidInputError("pgm map must be [H,W]");
  const int64_t H = map.dim(0), W = map.dim(1);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os << "P5\n" << W << " " << H << "\n65535\n";
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      int64_t v = std::lround(map.at(y, x) * scale);
      v = std::min<int64_t>(65535, std::max<int64_t>(0, v));
      os.put(static_cast<char>((v >> 8) & 0xff));
      os.put(static_cast<char>(v & 0xff));
    }
  if (!os) throw IoError("write to '" + path + "' failed");
}

inline Tensor read_pgm(const std::string& path, Real scale) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("map '" + path + "' not found");
  std::string magic;
  is >> magic;
  if (magic != "P5") throw IoError("'" + path + "' is not a binary PGM");
  int64_t W = detail::read_pnm_int(is);
  int64_t H = detail::read_pnm_int(is);
  int64_t maxval = detail::read_pnm_int(is);
  is.get();
  const bool wide = maxval > 255;
  Tensor map({H, W});
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      int64_t v;
      if (wide) {
        int hi = is.get(), lo = is.get();
        if (lo < 0) throw IoError("'" + path + "' truncated");
        v = (static_cast<int64_t>(hi) << 8) | lo;
      } else {
        v = is.get();
        if (v < 0) throw IoError("'" + path + "' truncated");
      }
      map.at(y, x) = static_cast<Real>(v) / scale;
    }
  return map;
}

// ---------------------------------------------------------------------------
// folder adapters: one reference layout per task
// ---------------------------------------------------------------------------

namespace detail {
inline std::vector<std::string> sorted_files(const std::filesystem::path& dir,
                                             const std::string& ext) {
  if (!std::filesystem::is_directory(dir))
    throw NotFoundError("dataset directory '" + dir.string() + "' not found");
  std::vector<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) names.push_back(e.path().string());
  std::sort(names.begin(), names.end());
  return names;
}
}  // namespace detail

// <root>/<class-name>/*.ppm — class ids assigned by sorted directory name
inline Dataset load_classification_folder(const std::string& root) {
  if (!std::filesystem::is_directory(root))
    throw NotFoundError("dataset directory '" + root + "' not found");
  std::vector<std::string> class_dirs;
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path().string());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw InvalidInputError("'" + root + "' holds no class directories");
  Dataset ds;
  ds.num_classes = static_cast<int64_t>(class_dirs.size());
  for (size_t c = 0; c < class_dirs.size(); ++c) {
    for (const auto& f : detail::sorted_files(class_dirs[c], ".ppm")) {
      Sample s;
      s.image = read_ppm(f);
      s.label = static_cast<int64_t>(c);
      ds.samples.push_back(std::move(s));
    }
  }
  if (ds.empty()) throw InvalidInputError("'" + root + "' holds no images");
  return ds;
}

// <root>/images/*.ppm + <root>/masks/*.pgm, matched by basename
inline Dataset load_segmentation_folder(const std::string& root) {
  auto images = detail::sorted_files(std::filesystem::path(root) / "images", ".ppm");
  if (images.empty()) throw InvalidInputError("'" + root + "/images' holds no images");
  Dataset ds;
  int64_t max_label = 0;
  for (const auto& f : images) {
    std::filesystem::path mask_path =
        std::filesystem::path(root) / "masks" / std::filesystem::path(f).stem();
    mask_path += ".pgm";
    Sample s;
    s.image = read_ppm(f);
    s.mask = read_pgm(mask_path.string(), 1.0);
    for (int64_t i = 0; i < s.mask.numel(); ++i) {
      int64_t v = static_cast<int64_t>(s.mask[i]);
      if (v != kIgnoreIndex) max_label = std::max(max_label, v);
    }
    ds.samples.push_back(std::move(s));
  }
  ds.num_seg_classes = max_label + 1;
  return ds;
}

// <root>/images/*.ppm + <root>/depth/*.pgm (16-bit millimeters)
inline Dataset load_depth_folder(const std::string& root) {
  auto images = detail::sorted_files(std::filesystem::path(root) / "images", ".ppm");
  if (images.empty()) throw InvalidInputError("'" + root + "/images' holds no images");
  Dataset ds;
  for (const auto& f : images) {
    std::filesystem::path depth_path =
        std::filesystem::path(root) / "depth" / std::filesystem::path(f).stem();
    depth_path += ".pgm";
    Sample s;
    s.image = read_ppm(f);
    s.depth = read_pgm(depth_path.string(), 1000.0);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace srb
