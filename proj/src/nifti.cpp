#include "jointseg/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "jointseg/error.hpp"

namespace jointseg {
namespace {

constexpr int kHeaderSize = 348;
constexpr int kDataOffset = 352;

enum : int16_t {
  DT_UINT8 = 2,
  DT_INT16 = 4,
  DT_INT32 = 8,
  DT_FLOAT32 = 16,
  DT_FLOAT64 = 64,
  DT_INT8 = 256,
  DT_UINT16 = 512,
  DT_UINT32 = 768,
  DT_INT64 = 1024,
  DT_UINT64 = 1280,
};

int bytes_per_voxel(int16_t datatype) {
  switch (datatype) {
    case DT_UINT8:
    case DT_INT8: return 1;
    case DT_INT16:
    case DT_UINT16: return 2;
    case DT_INT32:
    case DT_UINT32:
    case DT_FLOAT32: return 4;
    case DT_FLOAT64:
    case DT_INT64:
    case DT_UINT64: return 8;
    default: throw FormatError("unsupported NIfTI datatype " + std::to_string(datatype));
  }
}

bool has_gz_suffix(const std::filesystem::path& p) { return p.extension() == ".gz"; }

std::vector<uint8_t> read_all(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (f == nullptr) throw FormatError("cannot open " + path.string());
  std::vector<uint8_t> bytes;
  std::vector<uint8_t> chunk(1 << 16);
  for (;;) {
    const int n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()));
    if (n < 0) {
      gzclose(f);
      throw FormatError("corrupt compressed stream in " + path.string());
    }
    if (n == 0) break;
    bytes.insert(bytes.end(), chunk.begin(), chunk.begin() + n);
  }
  gzclose(f);
  return bytes;
}

void write_all(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
  const char* mode = has_gz_suffix(path) ? "wb6" : "wbT";
  gzFile f = gzopen(path.string().c_str(), mode);
  if (f == nullptr) throw Error("cannot write " + path.string());
  const int n = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
  const int rc = gzclose(f);
  if (n != static_cast<int>(bytes.size()) || rc != Z_OK) throw Error("short write to " + path.string());
}

class HeaderReader {
 public:
  HeaderReader(const std::vector<uint8_t>& bytes, bool swap) : bytes_(bytes), swap_(swap) {}

  template <typename T>
  T get(size_t offset) const {
    T v;
    std::memcpy(&v, bytes_.data() + offset, sizeof(T));
    if (swap_) v = swapped(v);
    return v;
  }

  template <typename T>
  static T swapped(T v) {
    uint8_t raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    std::reverse(raw, raw + sizeof(T));
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }

 private:
  const std::vector<uint8_t>& bytes_;
  bool swap_;
};

template <typename T>
void put(std::vector<uint8_t>& bytes, size_t offset, T v) {
  std::memcpy(bytes.data() + offset, &v, sizeof(T));
}

struct RawImage {
  Shape3 shape;
  Vec3 spacing{1, 1, 1};
  Vec3 origin{0, 0, 0};
  NiftiMetadata meta;
  int64_t channels = 1;
  std::vector<double> values;  // unscaled
};

RawImage read_raw(const std::filesystem::path& path, bool allow_channels = false) {
  const auto bytes = read_all(path);
  if (bytes.size() < kHeaderSize) throw FormatError("truncated NIfTI header in " + path.string());

  int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, bytes.data(), 4);
  bool swap = false;
  if (sizeof_hdr != kHeaderSize) {
    if (HeaderReader::swapped(sizeof_hdr) != kHeaderSize) throw FormatError("not a NIfTI-1 file: " + path.string());
    swap = true;
  }
  if (std::memcmp(bytes.data() + 344, "n+1", 4) != 0) {
    throw FormatError("missing single-file NIfTI-1 magic in " + path.string());
  }
  HeaderReader h(bytes, swap);

  RawImage img;
  img.meta.byte_swapped = swap;
  img.meta.gzipped = has_gz_suffix(path);
  const int16_t ndim = h.get<int16_t>(40);
  if (ndim < 1 || ndim > 7) throw FormatError("invalid dim[0] in " + path.string());
  int64_t dims[7] = {1, 1, 1, 1, 1, 1, 1};
  for (int i = 0; i < ndim; ++i) dims[i] = h.get<int16_t>(42 + 2 * i);
  for (int i = allow_channels ? 4 : 3; i < 7; ++i) {
    if (dims[i] != 1) throw ShapeError("expected a 3D payload in " + path.string());
  }
  img.shape = {dims[0], dims[1], dims[2]};
  img.channels = allow_channels ? dims[3] : 1;
  if (img.channels < 1) throw FormatError("non-positive channel count in " + path.string());
  if (!img.shape.valid()) throw FormatError("non-positive dimension in " + path.string());

  for (int i = 0; i < 3; ++i) {
    const float p = h.get<float>(80 + 4 * i);
    img.spacing[static_cast<size_t>(i)] = p > 0.0f ? p : 1.0;
  }
  const int16_t qform = h.get<int16_t>(252);
  const int16_t sform = h.get<int16_t>(254);
  if (sform > 0) {
    for (int i = 0; i < 3; ++i) img.origin[static_cast<size_t>(i)] = h.get<float>(280 + 16 * i + 12);
  } else if (qform > 0) {
    for (int i = 0; i < 3; ++i) img.origin[static_cast<size_t>(i)] = h.get<float>(268 + 4 * i);
  }

  img.meta.datatype = h.get<int16_t>(70);
  img.meta.bitpix = h.get<int16_t>(72);
  img.meta.scl_slope = h.get<float>(112);
  img.meta.scl_inter = h.get<float>(116);
  char descrip[81] = {};
  std::memcpy(descrip, bytes.data() + 148, 80);
  img.meta.description = descrip;

  const float vox_offset = h.get<float>(108);
  const size_t offset = vox_offset >= kHeaderSize ? static_cast<size_t>(vox_offset) : kDataOffset;
  const int bpv = bytes_per_voxel(img.meta.datatype);
  const size_t n = static_cast<size_t>(img.shape.voxels() * img.channels);
  if (bytes.size() < offset + n * static_cast<size_t>(bpv)) {
    throw FormatError("truncated NIfTI payload in " + path.string());
  }

  img.values.resize(n);
  const uint8_t* p = bytes.data() + offset;
  auto decode = [&]<typename T>(T) {
    for (size_t i = 0; i < n; ++i) {
      T v;
      std::memcpy(&v, p + i * sizeof(T), sizeof(T));
      if (swap) v = HeaderReader::swapped(v);
      img.values[i] = static_cast<double>(v);
    }
  };
  switch (img.meta.datatype) {
    case DT_UINT8: decode(uint8_t{}); break;
    case DT_INT8: decode(int8_t{}); break;
    case DT_INT16: decode(int16_t{}); break;
    case DT_UINT16: decode(uint16_t{}); break;
    case DT_INT32: decode(int32_t{}); break;
    case DT_UINT32: decode(uint32_t{}); break;
    case DT_INT64: decode(int64_t{}); break;
    case DT_UINT64: decode(uint64_t{}); break;
    case DT_FLOAT32: decode(float{}); break;
    case DT_FLOAT64: decode(double{}); break;
    default: throw FormatError("unsupported NIfTI datatype");
  }
  return img;
}

std::vector<uint8_t> make_header(const Shape3& shape, const Vec3& spacing, const Vec3& origin, int16_t datatype,
                                 const std::string& description, int channels = 1) {
  const int bpv = bytes_per_voxel(datatype);
  std::vector<uint8_t> bytes(kDataOffset + static_cast<size_t>(shape.voxels() * channels) * bpv, 0);
  put<int32_t>(bytes, 0, kHeaderSize);
  bytes[39] = 0;  // dim_info
  const int16_t dim[8] = {static_cast<int16_t>(channels > 1 ? 4 : 3), static_cast<int16_t>(shape.nx),
                          static_cast<int16_t>(shape.ny), static_cast<int16_t>(shape.nz),
                          static_cast<int16_t>(channels), 1, 1, 1};
  for (int i = 0; i < 8; ++i) put<int16_t>(bytes, 40 + 2 * i, dim[i]);
  put<int16_t>(bytes, 70, datatype);
  put<int16_t>(bytes, 72, static_cast<int16_t>(bpv * 8));
  const float pixdim[8] = {1.0f, static_cast<float>(spacing[0]), static_cast<float>(spacing[1]),
                           static_cast<float>(spacing[2]), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put<float>(bytes, 76 + 4 * i, pixdim[i]);
  put<float>(bytes, 108, static_cast<float>(kDataOffset));
  put<float>(bytes, 112, 1.0f);
  put<float>(bytes, 116, 0.0f);
  bytes[123] = 2;  // xyzt_units: mm
  std::strncpy(reinterpret_cast<char*>(bytes.data() + 148), description.c_str(), 79);
  put<int16_t>(bytes, 252, 1);
  put<int16_t>(bytes, 254, 1);
  for (int i = 0; i < 3; ++i) put<float>(bytes, 268 + 4 * i, static_cast<float>(origin[static_cast<size_t>(i)]));
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) {
      float v = 0.0f;
      if (c == r) v = static_cast<float>(spacing[static_cast<size_t>(r)]);
      if (c == 3) v = static_cast<float>(origin[static_cast<size_t>(r)]);
      put<float>(bytes, 280 + 16 * r + 4 * c, v);
    }
  }
  std::memcpy(bytes.data() + 344, "n+1", 4);
  return bytes;
}

void check_writable_shape(const Shape3& s) {
  if (!s.valid()) throw ShapeError("cannot write empty volume");
  constexpr int64_t kMax = std::numeric_limits<int16_t>::max();
  if (s.nx > kMax || s.ny > kMax || s.nz > kMax) throw ShapeError("dimension exceeds NIfTI-1 limit");
}

}  // namespace

std::pair<Volume, NiftiMetadata> load_volume(const std::filesystem::path& path) {
  RawImage raw = read_raw(path);
  Volume v;
  v.shape = raw.shape;
  v.spacing = raw.spacing;
  v.origin = raw.origin;
  v.data.resize(raw.values.size());
  const bool scaled = raw.meta.scl_slope != 0.0f && std::isfinite(raw.meta.scl_slope);
  for (size_t i = 0; i < raw.values.size(); ++i) {
    double x = raw.values[i];
    if (scaled) x = x * raw.meta.scl_slope + raw.meta.scl_inter;
    v.data[i] = static_cast<float>(x);
  }
  return {std::move(v), raw.meta};
}

void save_volume(const std::filesystem::path& path, const Volume& v, const std::string& description) {
  v.validate();
  check_writable_shape(v.shape);
  auto bytes = make_header(v.shape, v.spacing, v.origin, DT_FLOAT32, description);
  std::memcpy(bytes.data() + kDataOffset, v.data.data(), v.data.size() * sizeof(float));
  write_all(path, bytes);
}

LabelMap load_labels(const std::filesystem::path& path) {
  RawImage raw = read_raw(path);
  LabelMap m = LabelMap::filled(raw.shape, 0, 0);
  int32_t max_id = 0;
  for (size_t i = 0; i < raw.values.size(); ++i) {
    const double x = raw.values[i];
    if (x != std::floor(x) || !std::isfinite(x)) throw FormatError("non-integer label in " + path.string());
    if (x < 0) throw InputError("negative label id in " + path.string());
    m.data[i] = static_cast<int32_t>(x);
    max_id = std::max(max_id, m.data[i]);
  }
  m.class_count = max_id + 1;
  return m;
}

void save_labels(const std::filesystem::path& path, const LabelMap& labels, const Vec3& spacing) {
  check_writable_shape(labels.shape);
  auto bytes = make_header(labels.shape, spacing, {0, 0, 0}, DT_INT16, "labels");
  for (size_t i = 0; i < labels.data.size(); ++i) {
    put<int16_t>(bytes, kDataOffset + 2 * i, static_cast<int16_t>(labels.data[i]));
  }
  write_all(path, bytes);
}

LesionMask load_mask(const std::filesystem::path& path) {
  RawImage raw = read_raw(path);
  LesionMask m = LesionMask::zeros(raw.shape);
  for (size_t i = 0; i < raw.values.size(); ++i) m.data[i] = raw.values[i] != 0.0 ? 1 : 0;
  return m;
}

void save_mask(const std::filesystem::path& path, const LesionMask& mask, const Vec3& spacing) {
  check_writable_shape(mask.shape);
  auto bytes = make_header(mask.shape, spacing, {0, 0, 0}, DT_UINT8, "mask");
  std::memcpy(bytes.data() + kDataOffset, mask.data.data(), mask.data.size());
  write_all(path, bytes);
}

ProbabilityMap load_probability_map(const std::filesystem::path& path) {
  RawImage raw = read_raw(path, true);
  ProbabilityMap pm = ProbabilityMap::zeros(static_cast<int>(raw.channels), raw.shape);
  for (size_t i = 0; i < raw.values.size(); ++i) pm.data[i] = static_cast<float>(raw.values[i]);
  return pm;
}

void save_probability_map(const std::filesystem::path& path, const ProbabilityMap& pm, const Vec3& spacing) {
  check_writable_shape(pm.shape);
  auto bytes = make_header(pm.shape, spacing, {0, 0, 0}, DT_FLOAT32, "probabilities", pm.channels);
  std::memcpy(bytes.data() + kDataOffset, pm.data.data(), pm.data.size() * sizeof(float));
  write_all(path, bytes);
}

}  // namespace jointseg
