#pragma once

// Single-file uncompressed NIfTI-1 (.nii) reader/writer.
//
// Reads uint8, int16, float32 and float64 data in either byte order (detected
// from sizeof_hdr == 348) and applies scl_slope/scl_inter when the slope is
// non-zero. Writes little-endian, vox_offset 352, float32 volumes or uint8
// masks. Gzipped .nii.gz files must be decompressed beforehand.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mscsa/core/error.hpp"
#include "mscsa/data/volume.hpp"

namespace mscsa::data {

enum class NiftiErrc {
  io,
  bad_header_size,
  bad_magic,
  unsupported_datatype,
  unsupported_dimensions,
  truncated_data,
};

inline const char* to_string(NiftiErrc c) {
  switch (c) {
    case NiftiErrc::io: return "io";
    case NiftiErrc::bad_header_size: return "bad_header_size";
    case NiftiErrc::bad_magic: return "bad_magic";
    case NiftiErrc::unsupported_datatype: return "unsupported_datatype";
    case NiftiErrc::unsupported_dimensions: return "unsupported_dimensions";
    case NiftiErrc::truncated_data: return "truncated_data";
  }
  return "unknown";
}

class NiftiError : public DataError {
 public:
  NiftiError(NiftiErrc code, const std::string& what)
      : DataError(std::string("nifti[") + to_string(code) + "]: " + what), code_(code) {}
  NiftiErrc code() const { return code_; }

 private:
  NiftiErrc code_;
};

namespace nifti {

inline constexpr std::size_t kHeaderSize = 348;
inline constexpr std::size_t kVoxOffset = 352;

// Field byte offsets within the 348-byte header.
namespace offset {
inline constexpr std::size_t sizeof_hdr = 0;
inline constexpr std::size_t regular = 38;
inline constexpr std::size_t dim = 40;
inline constexpr std::size_t datatype = 70;
inline constexpr std::size_t bitpix = 72;
inline constexpr std::size_t pixdim = 76;
inline constexpr std::size_t vox_offset = 108;
inline constexpr std::size_t scl_slope = 112;
inline constexpr std::size_t scl_inter = 116;
inline constexpr std::size_t xyzt_units = 123;
inline constexpr std::size_t descrip = 148;
inline constexpr std::size_t qform_code = 252;
inline constexpr std::size_t sform_code = 254;
inline constexpr std::size_t srow_x = 280;
inline constexpr std::size_t magic = 344;
}  // namespace offset

enum Datatype : std::int16_t { uint8 = 2, int16 = 4, float32 = 16, float64 = 64 };

inline std::size_t bytes_per_voxel(std::int16_t dt) {
  switch (dt) {
    case uint8: return 1;
    case int16: return 2;
    case float32: return 4;
    case float64: return 8;
    default: return 0;
  }
}

template <typename V>
V load(const std::uint8_t* p, bool swap) {
  std::array<std::uint8_t, sizeof(V)> raw;
  std::memcpy(raw.data(), p, sizeof(V));
  if (swap) std::reverse(raw.begin(), raw.end());
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
  return std::bit_cast<V>(raw);
}

template <typename V>
void store_le(std::uint8_t* p, V value) {
  auto raw = std::bit_cast<std::array<std::uint8_t, sizeof(V)>>(value);
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
  std::memcpy(p, raw.data(), sizeof(V));
}

}  // namespace nifti

/// Decoded image: values in file order converted to our row-major layout,
/// with intensity scaling already applied.
struct NiftiImage {
  Triple extents{1, 1, 1};
  std::vector<double> values;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  Affine affine = identity_affine();
  std::int16_t datatype = 0;
  bool byte_swapped = false;
};

inline NiftiImage parse_nifti(const std::vector<std::uint8_t>& bytes) {
  using namespace nifti;
  if (bytes.size() < kHeaderSize) throw NiftiError(NiftiErrc::bad_header_size, "file shorter than header");
  const std::uint8_t* h = bytes.data();
  NiftiImage img;
  const auto hdr_le = load<std::int32_t>(h + offset::sizeof_hdr, false);
  if (hdr_le == 348) {
    img.byte_swapped = false;
  } else if (load<std::int32_t>(h + offset::sizeof_hdr, true) == 348) {
    img.byte_swapped = true;
  } else {
    throw NiftiError(NiftiErrc::bad_header_size, "sizeof_hdr is not 348 in either byte order");
  }
  const bool sw = img.byte_swapped;
  if (std::memcmp(h + offset::magic, "n+1\0", 4) != 0) {
    throw NiftiError(NiftiErrc::bad_magic, "expected single-file magic 'n+1'");
  }

  std::array<std::int16_t, 8> dim{};
  for (std::size_t i = 0; i < 8; ++i) dim[i] = load<std::int16_t>(h + offset::dim + 2 * i, sw);
  if (dim[0] < 1 || dim[0] > 7) throw NiftiError(NiftiErrc::unsupported_dimensions, "dim[0] out of range");
  for (int i = 1; i <= dim[0]; ++i) {
    if (dim[i] < 1) throw NiftiError(NiftiErrc::unsupported_dimensions, "non-positive extent");
    if (i > 3 && dim[i] != 1) throw NiftiError(NiftiErrc::unsupported_dimensions, "only 3D images are supported");
  }
  for (int i = 0; i < 3; ++i) img.extents[i] = (i + 1 <= dim[0]) ? static_cast<std::size_t>(dim[i + 1]) : 1;

  img.datatype = load<std::int16_t>(h + offset::datatype, sw);
  const std::size_t bpv = bytes_per_voxel(img.datatype);
  if (bpv == 0) {
    throw NiftiError(NiftiErrc::unsupported_datatype, "datatype " + std::to_string(img.datatype));
  }
  for (int i = 0; i < 3; ++i) {
    const float px = load<float>(h + offset::pixdim + 4 * (i + 1), sw);
    img.spacing[i] = px > 0 ? static_cast<double>(px) : 1.0;
  }
  if (load<std::int16_t>(h + offset::sform_code, sw) > 0) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c)
        img.affine[r * 4 + c] = load<float>(h + offset::srow_x + 16 * r + 4 * c, sw);
  } else {
    for (int i = 0; i < 3; ++i) img.affine[i * 5] = img.spacing[i];
  }

  const float vox_offset = load<float>(h + offset::vox_offset, sw);
  const auto start = static_cast<std::size_t>(std::max(0.0f, std::floor(vox_offset)));
  const std::size_t n = voxel_count(img.extents);
  if (start < kHeaderSize || bytes.size() < start || bytes.size() - start < n * bpv) {
    throw NiftiError(NiftiErrc::truncated_data, "data section holds fewer than " + std::to_string(n) + " voxels");
  }
  float slope = load<float>(h + offset::scl_slope, sw);
  float inter = load<float>(h + offset::scl_inter, sw);
  if (!std::isfinite(inter)) inter = 0.0f;
  // identity scaling is skipped so -0.0 survives a round trip
  const bool scaled = slope != 0.0f && std::isfinite(slope) && !(slope == 1.0f && inter == 0.0f);

  img.values.resize(n);
  const std::uint8_t* d = bytes.data() + start;
  const auto [nx, ny, nz] = img.extents;
  // file order: x fastest
  std::size_t f = 0;
  for (std::size_t k = 0; k < nz; ++k)
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i, ++f) {
        const std::uint8_t* p = d + f * bpv;
        double v = 0;
        switch (img.datatype) {
          case uint8: v = *p; break;
          case int16: v = load<std::int16_t>(p, sw); break;
          case float32: v = load<float>(p, sw); break;
          case float64: v = load<double>(p, sw); break;
          default: break;
        }
        if (scaled) v = v * slope + inter;
        img.values[voxel_index(img.extents, i, j, k)] = v;
      }
  return img;
}

inline NiftiImage read_nifti_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NiftiError(NiftiErrc::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_nifti(bytes);
}

inline Volume nifti_read_volume(const std::filesystem::path& path) {
  auto img = read_nifti_image(path);
  Volume v;
  v.extents = img.extents;
  v.spacing = img.spacing;
  v.affine = img.affine;
  v.voxels.assign(img.values.begin(), img.values.end());
  return v;
}

/// Any non-zero voxel counts as lesion.
inline LabelMask nifti_read_mask(const std::filesystem::path& path) {
  auto img = read_nifti_image(path);
  std::vector<std::uint8_t> vox(img.values.size());
  std::transform(img.values.begin(), img.values.end(), vox.begin(), [](double v) { return v != 0.0 ? 1 : 0; });
  LabelMask m(img.extents, std::move(vox), img.spacing);
  m.affine = img.affine;
  return m;
}

namespace nifti {

inline std::vector<std::uint8_t> encode_header(const Triple& extents, const std::array<double, 3>& spacing,
                                               const Affine& affine, std::int16_t datatype) {
  std::vector<std::uint8_t> h(kVoxOffset, 0);
  store_le<std::int32_t>(h.data() + offset::sizeof_hdr, 348);
  h[offset::regular] = 'r';
  const std::array<std::int16_t, 8> dim{3, static_cast<std::int16_t>(extents[0]), static_cast<std::int16_t>(extents[1]),
                                        static_cast<std::int16_t>(extents[2]), 1, 1, 1, 1};
  for (std::size_t i = 0; i < 8; ++i) store_le<std::int16_t>(h.data() + offset::dim + 2 * i, dim[i]);
  store_le<std::int16_t>(h.data() + offset::datatype, datatype);
  store_le<std::int16_t>(h.data() + offset::bitpix, static_cast<std::int16_t>(8 * bytes_per_voxel(datatype)));
  store_le<float>(h.data() + offset::pixdim, 1.0f);
  for (std::size_t i = 0; i < 3; ++i) {
    store_le<float>(h.data() + offset::pixdim + 4 * (i + 1), static_cast<float>(spacing[i]));
  }
  store_le<float>(h.data() + offset::vox_offset, static_cast<float>(kVoxOffset));
  store_le<float>(h.data() + offset::scl_slope, 1.0f);
  store_le<float>(h.data() + offset::scl_inter, 0.0f);
  h[offset::xyzt_units] = 2;  // millimetres
  store_le<std::int16_t>(h.data() + offset::qform_code, 0);
  store_le<std::int16_t>(h.data() + offset::sform_code, 1);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      store_le<float>(h.data() + offset::srow_x + 16 * r + 4 * c, static_cast<float>(affine[r * 4 + c]));
  std::memcpy(h.data() + offset::magic, "n+1\0", 4);
  // bytes 348..351: empty extension flag
  return h;
}

template <typename V, typename Src>
void write_file(const std::filesystem::path& path, std::vector<std::uint8_t> bytes, const Triple& extents,
                const Src& values) {
  const auto [nx, ny, nz] = extents;
  bytes.resize(kVoxOffset + nx * ny * nz * sizeof(V));
  std::uint8_t* d = bytes.data() + kVoxOffset;
  for (std::size_t k = 0; k < nz; ++k)
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i, d += sizeof(V)) {
        store_le<V>(d, static_cast<V>(values[voxel_index(extents, i, j, k)]));
      }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw NiftiError(NiftiErrc::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw NiftiError(NiftiErrc::io, "write failed for " + path.string());
}

}  // namespace nifti

inline void nifti_write(const Volume& v, const std::filesystem::path& path) {
  v.validate();
  nifti::write_file<float>(path, nifti::encode_header(v.extents, v.spacing, v.affine, nifti::float32), v.extents,
                           v.voxels);
}

inline void nifti_write(const LabelMask& m, const std::filesystem::path& path) {
  nifti::write_file<std::uint8_t>(path, nifti::encode_header(m.extents(), m.spacing, m.affine, nifti::uint8),
                                  m.extents(), m.voxels());
}

}  // namespace mscsa::data
