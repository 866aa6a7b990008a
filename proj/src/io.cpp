#include "gsocc/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace gsocc::io {
namespace {

using nlohmann::json;

constexpr std::uint64_t kMaxDim = std::uint64_t{1} << 20;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void bytes(std::string_view s) { buf_.append(s); }

  void write_to(const std::filesystem::path& path) const { write_text(path, buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string data, std::string source) : data_(std::move(data)), source_(std::move(source)) {}

  std::size_t remaining() const { return data_.size() - pos_; }

  void need(std::uint64_t n, const char* what) const {
    if (n > remaining()) {
      throw FormatError(FormatError::Kind::Truncated, source_ + ": truncated while reading " + what + " (need " +
                                                          std::to_string(n) + " bytes, " +
                                                          std::to_string(remaining()) + " left)");
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(data_[pos_++]) << (8 * i));
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void header(std::string_view magic) {
    if (remaining() < 4) {
      throw FormatError(FormatError::Kind::Truncated, source_ + ": file too short for a header");
    }
    const std::string got = bytes(4, "magic");
    if (got != magic) {
      throw FormatError(FormatError::Kind::BadMagic,
                        source_ + ": bad magic, expected '" + std::string(magic) + "', found '" + printable(got) + "'");
    }
    const std::uint32_t version = u32("version");
    if (version != kFormatVersion) {
      throw FormatError(FormatError::Kind::BadVersion, source_ + ": unsupported version " + std::to_string(version) +
                                                           " (expected " + std::to_string(kFormatVersion) + ")");
    }
  }

  void finish() const {
    if (remaining() != 0) {
      throw FormatError(FormatError::Kind::Malformed,
                        source_ + ": " + std::to_string(remaining()) + " unexpected trailing bytes");
    }
  }

  const std::string& source() const { return source_; }

 private:
  static std::string printable(const std::string& s) {
    std::string out;
    for (char c : s) out += (c >= 32 && c < 127) ? c : '?';
    return out;
  }

  std::string data_;
  std::string source_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ByteReader open_reader(const std::filesystem::path& path) { return ByteReader(read_file(path), path.string()); }

// n * m with overflow reported as a format error.
std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b, const std::string& source, const char* what) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) {
    throw FormatError(FormatError::Kind::DimensionOverflow, source + ": " + what + " overflows");
  }
  return a * b;
}

void check_dim(std::uint64_t d, const std::string& source, const char* what) {
  if (d > kMaxDim) {
    throw FormatError(FormatError::Kind::DimensionOverflow,
                      source + ": " + what + " " + std::to_string(d) + " exceeds " + std::to_string(kMaxDim));
  }
}

Eigen::Vector3d vec3(const json& j) {
  if (!j.is_array() || j.size() != 3) throw InvalidParameter("expected a 3-element array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json vec3_json(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }

}  // namespace

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

json read_json(const std::filesystem::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::Malformed, path.string() + ": " + e.what());
  }
}

void save_gaussians(const std::filesystem::path& path, std::span<const Gaussian> gaussians) {
  const int d = common_dim(gaussians);
  ByteWriter w;
  w.bytes("LGOC");
  w.u32(kFormatVersion);
  w.u64(gaussians.size());
  w.u32(static_cast<std::uint32_t>(d));
  for (const auto& g : gaussians) {
    for (int k = 0; k < 3; ++k) w.f32(g.mean[k]);
    w.f32(g.rotation.w());
    w.f32(g.rotation.x());
    w.f32(g.rotation.y());
    w.f32(g.rotation.z());
    for (int k = 0; k < 3; ++k) w.f32(g.log_scale[k]);
    w.f32(g.opacity_logit);
    for (int k = 0; k < d; ++k) w.f32(g.embedding[k]);
  }
  w.write_to(path);
}

std::vector<Gaussian> load_gaussians(const std::filesystem::path& path) {
  ByteReader r = open_reader(path);
  r.header("LGOC");
  const std::uint64_t count = r.u64("count");
  const std::uint32_t d = r.u32("embedding dimension");
  check_dim(d, r.source(), "embedding dimension");
  const std::uint64_t record = (kGeometryParams + static_cast<std::uint64_t>(d)) * 4;
  r.need(checked_mul(count, record, r.source(), "gaussian payload size"), "gaussian records");
  std::vector<Gaussian> out(count);
  for (auto& g : out) {
    for (int k = 0; k < 3; ++k) g.mean[k] = r.f32("mean");
    const double qw = r.f32("rotation"), qx = r.f32("rotation"), qy = r.f32("rotation"), qz = r.f32("rotation");
    g.rotation = Eigen::Quaterniond(qw, qx, qy, qz);
    for (int k = 0; k < 3; ++k) g.log_scale[k] = r.f32("log_scale");
    g.opacity_logit = r.f32("opacity_logit");
    g.embedding.resize(d);
    for (std::uint32_t k = 0; k < d; ++k) g.embedding[k] = r.f32("embedding");
  }
  r.finish();
  return out;
}

void save_grid(const std::filesystem::path& path, const GridFile& grid) {
  const std::size_t n = grid.spec.cell_count();
  ByteWriter w;
  w.bytes("VOXG");
  w.u32(kFormatVersion);
  for (int a = 0; a < 3; ++a) w.u32(static_cast<std::uint32_t>(grid.spec.dims[a]));
  w.f32(grid.spec.voxel_size);
  for (int a = 0; a < 3; ++a) w.f32(grid.spec.origin[a]);
  w.u8(static_cast<std::uint8_t>(grid.tag));
  switch (grid.tag) {
    case PayloadTag::U8Binary:
      if (grid.u8.size() != n) throw ShapeMismatch("save_grid: u8 payload length does not match dims");
      for (auto v : grid.u8) w.u8(v);
      break;
    case PayloadTag::U16Labels:
      if (grid.u16.size() != n) throw ShapeMismatch("save_grid: u16 payload length does not match dims");
      for (auto v : grid.u16) w.u16(v);
      break;
    case PayloadTag::F32Scalars:
      if (grid.f32.size() != n) throw ShapeMismatch("save_grid: f32 payload length does not match dims");
      for (auto v : grid.f32) w.u32(std::bit_cast<std::uint32_t>(v));
      break;
  }
  w.write_to(path);
}

GridFile load_grid(const std::filesystem::path& path) {
  ByteReader r = open_reader(path);
  r.header("VOXG");
  GridFile g;
  std::uint64_t n = 1;
  for (int a = 0; a < 3; ++a) {
    const std::uint32_t dim = r.u32("dims");
    if (dim == 0) throw FormatError(FormatError::Kind::Malformed, r.source() + ": grid dimension is zero");
    if (dim > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
      throw FormatError(FormatError::Kind::DimensionOverflow, r.source() + ": grid dimension too large");
    }
    g.spec.dims[a] = static_cast<int>(dim);
    n = checked_mul(n, dim, r.source(), "grid cell count");
  }
  g.spec.voxel_size = r.f32("voxel_size");
  for (int a = 0; a < 3; ++a) g.spec.origin[a] = r.f32("origin");
  const std::uint8_t tag = r.u8("payload tag");
  if (tag > 2) throw FormatError(FormatError::Kind::Malformed, r.source() + ": unknown payload tag " + std::to_string(tag));
  g.tag = static_cast<PayloadTag>(tag);
  const std::uint64_t width = g.tag == PayloadTag::U8Binary ? 1 : g.tag == PayloadTag::U16Labels ? 2 : 4;
  r.need(checked_mul(n, width, r.source(), "grid payload size"), "grid payload");
  switch (g.tag) {
    case PayloadTag::U8Binary:
      g.u8.resize(n);
      for (auto& v : g.u8) v = r.u8("payload");
      break;
    case PayloadTag::U16Labels:
      g.u16.resize(n);
      for (auto& v : g.u16) v = r.u16("payload");
      break;
    case PayloadTag::F32Scalars:
      g.f32.resize(n);
      for (auto& v : g.f32) v = r.f32("payload");
      break;
  }
  r.finish();
  return g;
}

void save_occupancy(const std::filesystem::path& path, const OccupancyGrid& grid, PayloadTag tag) {
  GridFile f;
  f.spec = grid.spec;
  f.tag = tag;
  if (tag == PayloadTag::U8Binary) {
    f.u8 = binarize(grid, 0.5);
  } else if (tag == PayloadTag::F32Scalars) {
    f.f32.assign(grid.values.data(), grid.values.data() + grid.values.size());
  } else {
    throw InvalidParameter("occupancy grids are stored as u8 or f32 payloads");
  }
  save_grid(path, f);
}

OccupancyGrid load_occupancy(const std::filesystem::path& path) {
  const GridFile f = load_grid(path);
  OccupancyGrid g = OccupancyGrid::zeros(f.spec);
  if (f.tag == PayloadTag::U8Binary) {
    for (std::size_t i = 0; i < f.u8.size(); ++i) g.values[static_cast<Eigen::Index>(i)] = f.u8[i] ? 1.0 : 0.0;
  } else if (f.tag == PayloadTag::F32Scalars) {
    for (std::size_t i = 0; i < f.f32.size(); ++i) g.values[static_cast<Eigen::Index>(i)] = f.f32[i];
  } else {
    throw FormatError(FormatError::Kind::Malformed, path.string() + ": expected an occupancy payload, found labels");
  }
  return g;
}

void save_semantics(const std::filesystem::path& path, const SemanticGrid& grid) {
  GridFile f;
  f.spec = grid.spec;
  f.tag = PayloadTag::U16Labels;
  f.u16 = grid.labels;
  save_grid(path, f);
}

SemanticGrid load_semantics(const std::filesystem::path& path) {
  GridFile f = load_grid(path);
  if (f.tag != PayloadTag::U16Labels) {
    throw FormatError(FormatError::Kind::Malformed, path.string() + ": expected a u16 label payload");
  }
  return {f.spec, std::move(f.u16)};
}

void save_table(const std::filesystem::path& path, const EmbeddingTable& table) {
  if (static_cast<Eigen::Index>(table.names.size()) != table.vectors.rows()) {
    throw ShapeMismatch("save_table: names and vectors differ in count");
  }
  ByteWriter w;
  w.bytes("EMBT");
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(table.dim()));
  w.u32(static_cast<std::uint32_t>(table.size()));
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& name = table.names[i];
    if (name.size() > 0xFFFF) throw InvalidParameter("category name longer than 65535 bytes");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    for (int k = 0; k < table.dim(); ++k) w.f32(table.vectors(static_cast<Eigen::Index>(i), k));
  }
  w.write_to(path);
}

EmbeddingTable load_table(const std::filesystem::path& path) {
  ByteReader r = open_reader(path);
  r.header("EMBT");
  const std::uint32_t d = r.u32("embedding dimension");
  const std::uint32_t count = r.u32("entry count");
  check_dim(d, r.source(), "embedding dimension");
  // Each entry needs at least a length prefix and d floats.
  r.need(checked_mul(count, 2 + 4 * static_cast<std::uint64_t>(d), r.source(), "table size"), "table entries");
  EmbeddingTable t;
  t.names.reserve(count);
  t.vectors.resize(count, d);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16("name length");
    t.names.push_back(r.bytes(len, "name"));
    for (std::uint32_t k = 0; k < d; ++k) t.vectors(i, k) = r.f32("vector");
  }
  r.finish();
  return t;
}

void save_feature_image(const std::filesystem::path& path, const FeatureImage& image) {
  const auto n = static_cast<Eigen::Index>(image.pixel_count());
  if (image.feature.rows() != n || image.feature.cols() != image.d || image.alpha.size() != n ||
      image.depth.size() != n) {
    throw ShapeMismatch("save_feature_image: channel sizes do not match the image");
  }
  ByteWriter w;
  w.bytes("FIMG");
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(image.width));
  w.u32(static_cast<std::uint32_t>(image.height));
  w.u32(static_cast<std::uint32_t>(image.d));
  for (Eigen::Index p = 0; p < n; ++p)
    for (int k = 0; k < image.d; ++k) w.f32(image.feature(p, k));
  for (Eigen::Index p = 0; p < n; ++p) w.f32(image.alpha[p]);
  for (Eigen::Index p = 0; p < n; ++p) w.f32(image.depth[p]);
  w.write_to(path);
}

FeatureImage load_feature_image(const std::filesystem::path& path) {
  ByteReader r = open_reader(path);
  r.header("FIMG");
  const std::uint32_t width = r.u32("width"), height = r.u32("height"), d = r.u32("d");
  check_dim(width, r.source(), "width");
  check_dim(height, r.source(), "height");
  check_dim(d, r.source(), "embedding dimension");
  const std::uint64_t pixels = checked_mul(width, height, r.source(), "pixel count");
  r.need(checked_mul(pixels, (static_cast<std::uint64_t>(d) + 2) * 4, r.source(), "image size"), "image payload");
  FeatureImage img = FeatureImage::zeros(static_cast<int>(width), static_cast<int>(height), static_cast<int>(d));
  const auto n = static_cast<Eigen::Index>(pixels);
  for (Eigen::Index p = 0; p < n; ++p)
    for (std::uint32_t k = 0; k < d; ++k) img.feature(p, k) = r.f32("feature");
  for (Eigen::Index p = 0; p < n; ++p) img.alpha[p] = r.f32("alpha");
  for (Eigen::Index p = 0; p < n; ++p) img.depth[p] = r.f32("depth");
  r.finish();
  return img;
}

json camera_to_json(const Camera& cam) {
  json pose = json::array();
  for (int i = 0; i < 4; ++i) {
    pose.push_back(json::array({cam.world_to_camera(i, 0), cam.world_to_camera(i, 1), cam.world_to_camera(i, 2),
                                cam.world_to_camera(i, 3)}));
  }
  return {{"fx", cam.fx}, {"fy", cam.fy},         {"cx", cam.cx},
          {"cy", cam.cy}, {"width", cam.width}, {"height", cam.height},
          {"world_to_camera", pose}};
}

Camera camera_from_json(const json& j) {
  try {
    Camera cam;
    cam.fx = j.at("fx").get<double>();
    cam.fy = j.at("fy").get<double>();
    cam.cx = j.at("cx").get<double>();
    cam.cy = j.at("cy").get<double>();
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    const auto& pose = j.at("world_to_camera");
    if (!pose.is_array() || pose.size() != 4) throw InvalidParameter("world_to_camera must be 4x4");
    for (int r = 0; r < 4; ++r) {
      if (!pose[r].is_array() || pose[r].size() != 4) throw InvalidParameter("world_to_camera must be 4x4");
      for (int c = 0; c < 4; ++c) cam.world_to_camera(r, c) = pose[r][c].get<double>();
    }
    cam.validate();
    return cam;
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::Malformed, std::string("camera: ") + e.what());
  }
}

void save_camera(const std::filesystem::path& path, const Camera& cam) {
  write_text(path, camera_to_json(cam).dump(2) + "\n");
}

Camera load_camera(const std::filesystem::path& path) { return camera_from_json(read_json(path)); }

json grid_spec_to_json(const GridSpec& spec) {
  return {{"dims", spec.dims}, {"origin", vec3_json(spec.origin)}, {"voxel_size", spec.voxel_size}};
}

GridSpec grid_spec_from_json(const json& j) {
  GridSpec s;
  s.dims = j.at("dims").get<std::array<int, 3>>();
  s.origin = vec3(j.at("origin"));
  s.voxel_size = j.at("voxel_size").get<double>();
  s.validate();
  return s;
}

json scene_spec_to_json(const SceneSpec& spec) {
  json prims = json::array();
  for (const auto& p : spec.primitives) {
    prims.push_back({{"kind", to_string(p.kind)},
                     {"center", vec3_json(p.center)},
                     {"rotation", json::array({p.rotation.w(), p.rotation.x(), p.rotation.y(), p.rotation.z()})},
                     {"size", vec3_json(p.size)},
                     {"category", p.category}});
  }
  const auto& c = spec.cameras;
  return {{"grid", grid_spec_to_json(spec.grid)},
          {"primitives", prims},
          {"cameras",
           {{"count", c.count},
            {"radius", c.radius},
            {"elevation_deg", c.elevation_deg},
            {"fov_deg", c.fov_deg},
            {"width", c.width},
            {"height", c.height}}},
          {"embedding_dim", spec.embedding_dim},
          {"seed", spec.seed}};
}

SceneSpec scene_spec_from_json(const json& j) {
  try {
    SceneSpec s;
    s.grid = grid_spec_from_json(j.at("grid"));
    for (const auto& p : j.value("primitives", json::array())) {
      Primitive prim;
      prim.kind = parse_primitive_kind(p.at("kind").get<std::string>());
      prim.center = vec3(p.at("center"));
      if (p.contains("rotation")) {
        const auto& q = p.at("rotation");
        prim.rotation = Eigen::Quaterniond(q.at(0).get<double>(), q.at(1).get<double>(), q.at(2).get<double>(),
                                           q.at(3).get<double>());
      }
      prim.size = vec3(p.at("size"));
      prim.category = p.at("category").get<std::string>();
      s.primitives.push_back(prim);
    }
    if (j.contains("cameras")) {
      const auto& c = j.at("cameras");
      s.cameras.count = c.value("count", s.cameras.count);
      s.cameras.radius = c.value("radius", s.cameras.radius);
      s.cameras.elevation_deg = c.value("elevation_deg", s.cameras.elevation_deg);
      s.cameras.fov_deg = c.value("fov_deg", s.cameras.fov_deg);
      s.cameras.width = c.value("width", s.cameras.width);
      s.cameras.height = c.value("height", s.cameras.height);
    }
    s.embedding_dim = j.value("embedding_dim", s.embedding_dim);
    s.seed = j.value("seed", s.seed);
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::Malformed, std::string("scene spec: ") + e.what());
  }
}

SceneSpec load_scene_spec(const std::filesystem::path& path) { return scene_spec_from_json(read_json(path)); }

void save_scene(const std::filesystem::path& dir, const SceneBundle& bundle, const SceneSpec* spec) {
  bundle.validate();
  std::filesystem::create_directories(dir);
  save_occupancy(dir / "occupancy.voxg", bundle.occupancy, PayloadTag::U8Binary);
  save_semantics(dir / "semantics.voxg", bundle.semantics);
  save_table(dir / "table.embt", bundle.table);
  json views = json::array();
  for (std::size_t i = 0; i < bundle.cameras.size(); ++i) {
    const std::string cam = "camera_" + std::to_string(i) + ".json";
    const std::string teacher = "teacher_" + std::to_string(i) + ".fimg";
    save_camera(dir / cam, bundle.cameras[i]);
    save_feature_image(dir / teacher, bundle.teachers[i]);
    views.push_back({{"camera", cam}, {"teacher", teacher}});
  }
  json manifest = {{"format", "gsocc-scene"},
                   {"version", kFormatVersion},
                   {"overlap_rule", "later primitive wins"},
                   {"occupancy", "occupancy.voxg"},
                   {"semantics", "semantics.voxg"},
                   {"table", "table.embt"},
                   {"views", views}};
  if (spec) manifest["spec"] = scene_spec_to_json(*spec);
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

SceneBundle load_scene(const std::filesystem::path& dir) {
  const json m = read_json(dir / "manifest.json");
  try {
    if (m.at("format").get<std::string>() != "gsocc-scene") {
      throw FormatError(FormatError::Kind::BadMagic, (dir / "manifest.json").string() + ": not a scene manifest");
    }
    if (m.at("version").get<std::uint32_t>() != kFormatVersion) {
      throw FormatError(FormatError::Kind::BadVersion, (dir / "manifest.json").string() + ": unsupported version");
    }
    SceneBundle b;
    b.occupancy = load_occupancy(dir / m.at("occupancy").get<std::string>());
    b.semantics = load_semantics(dir / m.at("semantics").get<std::string>());
    b.table = load_table(dir / m.at("table").get<std::string>());
    for (const auto& v : m.at("views")) {
      b.cameras.push_back(load_camera(dir / v.at("camera").get<std::string>()));
      b.teachers.push_back(load_feature_image(dir / v.at("teacher").get<std::string>()));
    }
    b.validate();
    return b;
  } catch (const json::exception& e) {
    throw FormatError(FormatError::Kind::Malformed, (dir / "manifest.json").string() + ": " + e.what());
  }
}

}  // namespace gsocc::io
