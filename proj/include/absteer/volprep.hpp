#pragma once

// Volumetric preprocessing: raw/NIfTI-1 readers, HU windowing,
// align-corners trilinear resampling, YUV4MPEG2 export, and band pooling.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "absteer/common.hpp"

namespace absteer {

using Dims3 = std::array<size_t, 3>;       // depth, height, width
using Spacing3 = std::array<double, 3>;    // mm, same axis order

enum class VoxelKind { hu, unit };

/// Depth-major, row-major-per-slice scalar grid. HU volumes hold int16
/// values (stored as double so resampled volumes can carry fractions);
/// unit volumes hold windowed values in [0, 1].
struct Volume {
  Dims3 dims{0, 0, 0};
  Spacing3 spacing{1.0, 1.0, 1.0};
  VoxelKind kind = VoxelKind::hu;
  std::vector<double> voxels;

  Volume() = default;
  Volume(Dims3 d, Spacing3 s, VoxelKind k, double fill = 0.0)
      : dims(d), spacing(s), kind(k), voxels(d[0] * d[1] * d[2], fill) {}

  size_t depth() const { return dims[0]; }
  size_t height() const { return dims[1]; }
  size_t width() const { return dims[2]; }
  size_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
  size_t slice_size() const { return dims[1] * dims[2]; }

  double& at(size_t z, size_t y, size_t x) { return voxels[(z * dims[1] + y) * dims[2] + x]; }
  double at(size_t z, size_t y, size_t x) const { return voxels[(z * dims[1] + y) * dims[2] + x]; }

  void validate() const {
    if (voxels.size() != voxel_count()) throw Error(ErrorKind::size, "voxel count does not match dims");
    for (double s : spacing)
      if (!(s > 0.0)) throw Error(ErrorKind::config, "voxel spacing must be positive");
  }
};

using FeatureVector = std::vector<double>;

// ---------------------------------------------------------------------------
// Readers and writers

namespace detail {

inline std::int16_t to_int16_checked(double v) {
  const double r = std::nearbyint(v);
  if (!(r >= -32768.0 && r <= 32767.0)) throw Error(ErrorKind::range, "voxel value does not fit int16");
  return static_cast<std::int16_t>(r);
}

inline std::uint64_t le(std::string_view data, size_t pos, int bytes, bool swap) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int shift = swap ? 8 * (bytes - 1 - i) : 8 * i;
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[pos + i])) << shift;
  }
  return v;
}

inline float le_f32(std::string_view data, size_t pos, bool swap) {
  return std::bit_cast<float>(static_cast<std::uint32_t>(le(data, pos, 4, swap)));
}

}  // namespace detail

/// "<name>.json" header plus "<name>.raw" little-endian int16 voxels.
inline Volume read_raw_volume(const std::filesystem::path& header_path) {
  json header;
  try {
    header = json::parse(read_file(header_path));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, "volume header is not JSON: " + header_path.string());
  }
  Volume v;
  try {
    const auto dims = header.at("dims").get<std::vector<size_t>>();
    const auto spacing = header.at("spacing").get<std::vector<double>>();
    const auto dtype = header.at("dtype").get<std::string>();
    if (dims.size() != 3 || spacing.size() != 3) throw Error(ErrorKind::format, "dims/spacing must have 3 entries");
    if (dtype != "int16le") throw Error(ErrorKind::unsupported, "volume dtype '" + dtype + "'");
    v = Volume({dims[0], dims[1], dims[2]}, {spacing[0], spacing[1], spacing[2]}, VoxelKind::hu);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::format, std::string("malformed volume header: ") + e.what());
  }
  std::filesystem::path raw_path = header_path;
  raw_path.replace_extension(".raw");
  const std::string data = read_file(raw_path);
  if (data.size() != 2 * v.voxel_count())
    throw Error(ErrorKind::size, raw_path.string() + " holds " + std::to_string(data.size()) + " bytes, header implies " +
                                     std::to_string(2 * v.voxel_count()));
  for (size_t i = 0; i < v.voxels.size(); ++i)
    v.voxels[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(detail::le(data, 2 * i, 2, false)));
  v.validate();
  return v;
}

inline void write_raw_volume(const Volume& v, const std::filesystem::path& header_path) {
  json header{{"dims", v.dims}, {"spacing", v.spacing}, {"dtype", "int16le"}};
  std::string data;
  data.reserve(2 * v.voxels.size());
  for (double x : v.voxels) {
    const auto u = static_cast<std::uint16_t>(detail::to_int16_checked(x));
    data.push_back(static_cast<char>(u & 0xff));
    data.push_back(static_cast<char>(u >> 8));
  }
  std::filesystem::path raw_path = header_path;
  raw_path.replace_extension(".raw");
  write_file_atomic(raw_path, data);
  write_file_atomic(header_path, header.dump() + "\n");
}

/// Uncompressed single-file NIfTI-1 (".nii") with int16 data. Orientation
/// and intensity scaling fields are ignored.
inline Volume read_nifti(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  if (data.size() < 348) throw Error(ErrorKind::format, "file too short for a NIfTI-1 header");
  bool swap = false;
  const auto sizeof_hdr = detail::le(data, 0, 4, false);
  if (sizeof_hdr != 348) {
    if (detail::le(data, 0, 4, true) != 348) throw Error(ErrorKind::format, "bad NIfTI sizeof_hdr");
    swap = true;
  }
  const std::string_view magic(data.data() + 344, 4);
  if (magic != std::string_view("n+1\0", 4)) throw Error(ErrorKind::format, "bad NIfTI magic (need single-file n+1)");
  const auto ndim = static_cast<std::int16_t>(detail::le(data, 40, 2, swap));
  if (ndim < 3) throw Error(ErrorKind::unsupported, "NIfTI dim[0]=" + std::to_string(ndim) + " (need 3)");
  for (int i = 4; i <= ndim && i <= 7; ++i) {
    if (static_cast<std::int16_t>(detail::le(data, 40 + 2 * i, 2, swap)) > 1)
      throw Error(ErrorKind::unsupported, "NIfTI volumes with more than 3 dimensions");
  }
  const auto nx = static_cast<std::int16_t>(detail::le(data, 42, 2, swap));
  const auto ny = static_cast<std::int16_t>(detail::le(data, 44, 2, swap));
  const auto nz = static_cast<std::int16_t>(detail::le(data, 46, 2, swap));
  if (nx < 1 || ny < 1 || nz < 1) throw Error(ErrorKind::format, "non-positive NIfTI dimension");
  const auto datatype = static_cast<std::int16_t>(detail::le(data, 70, 2, swap));
  if (datatype != 4) throw Error(ErrorKind::unsupported, "NIfTI datatype code " + std::to_string(datatype));
  const auto bitpix = static_cast<std::int16_t>(detail::le(data, 72, 2, swap));
  if (bitpix != 16) throw Error(ErrorKind::format, "NIfTI bitpix " + std::to_string(bitpix) + " for int16 data");
  const Spacing3 spacing{std::abs(detail::le_f32(data, 76 + 12, swap)), std::abs(detail::le_f32(data, 76 + 8, swap)),
                         std::abs(detail::le_f32(data, 76 + 4, swap))};
  const float vox_offset = detail::le_f32(data, 108, swap);
  if (!(vox_offset >= 348.0f)) throw Error(ErrorKind::format, "NIfTI vox_offset below header size");
  Volume v({static_cast<size_t>(nz), static_cast<size_t>(ny), static_cast<size_t>(nx)}, spacing, VoxelKind::hu);
  const auto offset = static_cast<size_t>(vox_offset);
  if (data.size() < offset + 2 * v.voxel_count())
    throw Error(ErrorKind::size, "NIfTI data truncated: need " + std::to_string(offset + 2 * v.voxel_count()) +
                                     " bytes, have " + std::to_string(data.size()));
  // NIfTI stores x fastest, then y, then z, which is our depth-major order.
  for (size_t i = 0; i < v.voxels.size(); ++i)
    v.voxels[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(detail::le(data, offset + 2 * i, 2, swap)));
  for (double& s : v.spacing)
    if (!(s > 0.0)) s = 1.0;
  return v;
}

/// Dispatches on extension: ".json" for the raw format, ".nii" for NIfTI-1.
inline Volume read_volume(const std::filesystem::path& path) {
  const std::string ext = to_lower(path.extension().string());
  if (ext == ".json") return read_raw_volume(path);
  if (ext == ".nii") return read_nifti(path);
  if (ext == ".raw") {
    std::filesystem::path header = path;
    header.replace_extension(".json");
    return read_raw_volume(header);
  }
  throw Error(ErrorKind::format, "unrecognized volume file '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Transforms

inline Volume window_hu(const Volume& in, double lo = -1000.0, double hi = 200.0) {
  if (!(lo < hi)) throw Error(ErrorKind::config, "HU window requires lo < hi");
  Volume out = in;
  out.kind = VoxelKind::unit;
  const double width = hi - lo;
  for (double& v : out.voxels) v = (std::clamp(v, lo, hi) - lo) / width;
  return out;
}

/// Align-corners trilinear resampling: output index i samples source
/// coordinate i * (n_src - 1) / (n_dst - 1) on each axis.
inline Volume resample(const Volume& in, Dims3 target = {240, 480, 480}, unsigned threads = 1) {
  for (size_t t : target)
    if (t < 1) throw Error(ErrorKind::config, "resample target dimensions must be >= 1");
  in.validate();
  Spacing3 spacing = in.spacing;
  for (int a = 0; a < 3; ++a)
    if (target[a] > 1 && in.dims[a] > 1)
      spacing[a] = in.spacing[a] * static_cast<double>(in.dims[a] - 1) / static_cast<double>(target[a] - 1);
  Volume out(target, spacing, in.kind);

  struct AxisSample {
    size_t i0, i1;
    double frac;
  };
  auto axis = [](size_t n_src, size_t n_dst) {
    std::vector<AxisSample> s(n_dst);
    for (size_t i = 0; i < n_dst; ++i) {
      const double coord = n_dst == 1 ? 0.0
                                      : static_cast<double>(i) * static_cast<double>(n_src - 1) /
                                            static_cast<double>(n_dst - 1);
      size_t i0 = static_cast<size_t>(std::floor(coord));
      if (i0 >= n_src - 1) i0 = n_src - 1;
      const double frac = coord - static_cast<double>(i0);
      s[i] = {i0, std::min(i0 + 1, n_src - 1), frac};
    }
    return s;
  };
  const auto zs = axis(in.dims[0], target[0]);
  const auto ys = axis(in.dims[1], target[1]);
  const auto xs = axis(in.dims[2], target[2]);
  auto lerp = [](double a, double b, double t) { return t == 0.0 ? a : a + (b - a) * t; };

  auto work = [&](size_t z_begin, size_t z_end) {
    for (size_t z = z_begin; z < z_end; ++z) {
      const auto& sz = zs[z];
      for (size_t y = 0; y < target[1]; ++y) {
        const auto& sy = ys[y];
        for (size_t x = 0; x < target[2]; ++x) {
          const auto& sx = xs[x];
          const double c00 = lerp(in.at(sz.i0, sy.i0, sx.i0), in.at(sz.i0, sy.i0, sx.i1), sx.frac);
          const double c01 = lerp(in.at(sz.i0, sy.i1, sx.i0), in.at(sz.i0, sy.i1, sx.i1), sx.frac);
          const double c10 = lerp(in.at(sz.i1, sy.i0, sx.i0), in.at(sz.i1, sy.i0, sx.i1), sx.frac);
          const double c11 = lerp(in.at(sz.i1, sy.i1, sx.i0), in.at(sz.i1, sy.i1, sx.i1), sx.frac);
          out.at(z, y, x) = lerp(lerp(c00, c01, sy.frac), lerp(c10, c11, sy.frac), sz.frac);
        }
      }
    }
  };
  const size_t n_threads = std::max<size_t>(1, std::min<size_t>(threads, target[0]));
  if (n_threads == 1) {
    work(0, target[0]);
  } else {
    std::vector<std::thread> pool;
    const size_t chunk = (target[0] + n_threads - 1) / n_threads;
    for (size_t t = 0; t < n_threads; ++t) {
      const size_t b = t * chunk, e = std::min(target[0], b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }
  return out;
}

inline void check_unit_range(const Volume& v) {
  for (double x : v.voxels)
    if (!(x >= 0.0 && x <= 1.0)) throw Error(ErrorKind::range, "volume values must lie in [0, 1]; window first");
}

/// YUV4MPEG2, 4:2:0 (C420jpeg), one frame per slice, neutral chroma.
inline std::string encode_y4m(const Volume& v, unsigned fps = 18) {
  check_unit_range(v);
  const size_t w = v.width(), h = v.height();
  const size_t chroma = ((w + 1) / 2) * ((h + 1) / 2);
  std::string out = "YUV4MPEG2 W" + std::to_string(w) + " H" + std::to_string(h) + " F" + std::to_string(fps) +
                    ":1 Ip A1:1 C420jpeg\n";
  out.reserve(out.size() + v.depth() * (6 + w * h + 2 * chroma));
  for (size_t z = 0; z < v.depth(); ++z) {
    out += "FRAME\n";
    const double* slice = v.voxels.data() + z * v.slice_size();
    for (size_t i = 0; i < w * h; ++i) out.push_back(static_cast<char>(std::lround(slice[i] * 255.0)));
    out.append(2 * chroma, static_cast<char>(128));
  }
  return out;
}

inline void export_y4m(const Volume& v, const std::filesystem::path& path, unsigned fps = 18) {
  write_file_atomic(path, encode_y4m(v, fps));
}

/// Sizes of `bands` contiguous depth bands; the remainder goes to the
/// leading bands.
inline std::vector<size_t> band_sizes(size_t depth, size_t bands) {
  if (bands < 1 || depth < bands) throw Error(ErrorKind::config, "pool_features needs depth >= bands >= 1");
  std::vector<size_t> sizes(bands, depth / bands);
  for (size_t i = 0; i < depth % bands; ++i) ++sizes[i];
  return sizes;
}

/// (mean, population stddev) per depth band, interleaved.
inline FeatureVector pool_features(const Volume& v, size_t bands = 16) {
  check_unit_range(v);
  const auto sizes = band_sizes(v.depth(), bands);
  FeatureVector out;
  out.reserve(2 * bands);
  size_t z = 0;
  for (size_t b = 0; b < bands; ++b) {
    // Welford over the voxels of this band.
    double mean = 0.0, m2 = 0.0;
    size_t n = 0;
    for (size_t zz = z; zz < z + sizes[b]; ++zz) {
      const double* slice = v.voxels.data() + zz * v.slice_size();
      for (size_t i = 0; i < v.slice_size(); ++i) {
        ++n;
        const double d = slice[i] - mean;
        mean += d / static_cast<double>(n);
        m2 += d * (slice[i] - mean);
      }
    }
    out.push_back(mean);
    out.push_back(n ? std::sqrt(std::max(0.0, m2 / static_cast<double>(n))) : 0.0);
    z += sizes[b];
  }
  return out;
}

/// Per-dimension z-scoring fitted on a training subset.
struct FeatureScaler {
  std::vector<double> mean;
  std::vector<double> scale;

  static FeatureScaler fit(const std::vector<FeatureVector>& rows) {
    FeatureScaler s;
    if (rows.empty()) return s;
    const size_t d = rows.front().size();
    s.mean.assign(d, 0.0);
    s.scale.assign(d, 1.0);
    for (const auto& r : rows)
      for (size_t j = 0; j < d; ++j) s.mean[j] += r.at(j) / static_cast<double>(rows.size());
    for (size_t j = 0; j < d; ++j) {
      double var = 0.0;
      for (const auto& r : rows) var += (r[j] - s.mean[j]) * (r[j] - s.mean[j]);
      var /= static_cast<double>(rows.size());
      s.scale[j] = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
    return s;
  }

  FeatureVector apply(const FeatureVector& f) const {
    if (mean.empty()) return f;
    if (f.size() != mean.size()) throw Error(ErrorKind::shape, "feature length does not match scaler");
    FeatureVector out(f.size());
    for (size_t j = 0; j < f.size(); ++j) out[j] = (f[j] - mean[j]) / scale[j];
    return out;
  }

  json to_json() const { return json{{"mean", mean}, {"scale", scale}}; }
};

}  // namespace absteer
