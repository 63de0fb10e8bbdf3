#include "surfmap/synthgen.hpp"

#include "surfmap/config_util.hpp"
#include "surfmap/error.hpp"
#include "surfmap/io.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <random>
#include <thread>

namespace surfmap {

namespace fs = std::filesystem;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Uniform double in [0, 1) from the top 53 bits; independent of the standard
// library's distribution implementations.
double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

Eigen::Vector3d direction(double theta, double phi) {
  return {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
}

std::string view_stem(int k) { return "view_" + std::to_string(k); }
fs::path instance_dir(const fs::path& root, int id) { return root / ("inst_" + std::to_string(id)); }

}  // namespace

void InstanceSpec::validate() const {
  if (n_harmonics < 0) throw ConfigError("n_harmonics must be >= 0");
  if (!(base_radius > 0.0 && base_radius < 0.5)) throw ConfigError("base_radius must be in (0, 0.5)");
  if (!(amplitude >= 0.0 && amplitude <= 0.3 * base_radius + 1e-12)) {
    throw ConfigError("amplitude must lie in [0, 0.3 * base_radius]");
  }
}

HarmonicShape HarmonicShape::from_spec(const InstanceSpec& spec) {
  spec.validate();
  HarmonicShape shape;
  shape.base_radius = spec.base_radius;
  std::mt19937_64 rng(splitmix64(spec.seed));
  const double bound = spec.n_harmonics > 0 ? spec.amplitude / spec.n_harmonics : 0.0;
  for (int k = 0; k < spec.n_harmonics; ++k) {
    shape.a.push_back(bound * (2.0 * unit_uniform(rng) - 1.0));
    shape.p.push_back(kTwoPi * unit_uniform(rng));
    shape.q.push_back(kTwoPi * unit_uniform(rng));
  }
  return shape;
}

double HarmonicShape::radius(double theta, double phi) const {
  double s = 1.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double k = static_cast<double>(i + 1);
    s += a[i] * std::sin(k * theta + p[i]) * std::sin(k * phi + q[i]);
  }
  return base_radius * s;
}

Eigen::Vector3d HarmonicShape::point(double theta, double phi) const {
  return radius(theta, phi) * direction(theta, phi);
}

torch::Tensor chart_validity(int posmap_resolution) {
  auto validity = torch::ones({posmap_resolution, posmap_resolution}, torch::kBool);
  validity.index_put_({0}, false);
  validity.index_put_({posmap_resolution - 1}, false);
  return validity;
}

Instance make_instance(const InstanceSpec& spec, int sphere_resolution, int posmap_resolution) {
  if (sphere_resolution < 8) throw ConfigError("sphere_resolution must be >= 8");
  if (posmap_resolution < 4) throw ConfigError("posmap_resolution must be >= 4");
  const auto shape = HarmonicShape::from_spec(spec);

  const int rings = sphere_resolution;
  const int segments = 2 * sphere_resolution;
  const int cols = segments + 1;
  Instance inst;
  auto& mesh = inst.mesh;
  mesh.vertices.resize((rings + 1) * cols, 3);
  mesh.uv.resize((rings + 1) * cols, 2);
  for (int i = 0; i <= rings; ++i) {
    const double v = static_cast<double>(i) / rings;
    for (int j = 0; j <= segments; ++j) {
      const int idx = i * cols + j;
      const double u = static_cast<double>(j) / segments;
      // The closing seam column reuses column 0's position bit for bit.
      mesh.vertices.row(idx) = j == segments ? mesh.vertices.row(i * cols).eval()
                                             : shape.point(chart_theta(v), chart_phi(u)).transpose();
      mesh.uv.row(idx) << u, v;
    }
  }
  mesh.faces.resize(2 * rings * segments, 3);
  int f = 0;
  for (int i = 0; i < rings; ++i) {
    for (int j = 0; j < segments; ++j) {
      const int v00 = i * cols + j;
      const int v01 = v00 + 1;
      const int v10 = v00 + cols;
      const int v11 = v10 + 1;
      mesh.faces.row(f++) << v00, v10, v11;
      mesh.faces.row(f++) << v00, v11, v01;
    }
  }

  const int s = posmap_resolution;
  auto grid = torch::empty({s, s, 3}, torch::kFloat64);
  auto acc = grid.accessor<double, 3>();
  for (int r = 0; r < s; ++r) {
    for (int c = 0; c < s; ++c) {
      const auto pt = shape.point(chart_theta(texel_coord(r, s)), chart_phi(texel_coord(c, s)));
      for (int d = 0; d < 3; ++d) acc[r][c][d] = pt(d);
    }
  }
  inst.posmap = {grid, chart_validity(s)};
  return inst;
}

Eigen::Vector3d uv_albedo(double u, double v) {
  return {0.5 + 0.5 * std::cos(kTwoPi * u), 0.5 + 0.5 * std::sin(kTwoPi * u), v};
}

RenderResult rasterize(const TemplateMesh& mesh, const CameraPose& cam,
                       const Eigen::Vector3d& light_dir, const ShadingParams& shading) {
  cam.validate();
  mesh.validate();
  const int w = cam.width;
  const int h = cam.height;
  const auto nv = mesh.vertices.rows();

  // Smooth normals: area-weighted face normals accumulated over vertices that
  // share a position (seam duplicates), so shading is continuous there.
  std::map<std::array<double, 3>, int> canonical;
  std::vector<int> canon(nv);
  for (Eigen::Index i = 0; i < nv; ++i) {
    const std::array<double, 3> key{mesh.vertices(i, 0), mesh.vertices(i, 1), mesh.vertices(i, 2)};
    canon[i] = canonical.try_emplace(key, static_cast<int>(i)).first->second;
  }
  std::vector<Eigen::Vector3d> normal(nv, Eigen::Vector3d::Zero());
  for (Eigen::Index f = 0; f < mesh.faces.rows(); ++f) {
    const Eigen::Vector3d a = mesh.vertices.row(mesh.faces(f, 0));
    const Eigen::Vector3d b = mesh.vertices.row(mesh.faces(f, 1));
    const Eigen::Vector3d c = mesh.vertices.row(mesh.faces(f, 2));
    const Eigen::Vector3d n = (b - a).cross(c - a);
    for (int k = 0; k < 3; ++k) normal[canon[mesh.faces(f, k)]] += n;
  }
  for (Eigen::Index i = 0; i < nv; ++i) normal[i] = normal[canon[i]];

  std::vector<Eigen::Vector3d> xc(nv);
  std::vector<Eigen::Vector2d> screen(nv);
  for (Eigen::Index i = 0; i < nv; ++i) {
    xc[i] = cam.rotation * mesh.vertices.row(i).transpose() + cam.translation;
    if (xc[i].z() > kMinDepth) {
      screen[i] = {cam.fx * xc[i].x() / xc[i].z() + cam.cx, cam.fy * xc[i].y() / xc[i].z() + cam.cy};
    }
  }

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> zbuf(static_cast<size_t>(w) * h, inf);
  std::vector<Eigen::Vector2d> uvbuf(zbuf.size(), Eigen::Vector2d::Zero());
  std::vector<Eigen::Vector3d> nbuf(zbuf.size(), Eigen::Vector3d::Zero());

  auto edge = [](const Eigen::Vector2d& a, const Eigen::Vector2d& b, const Eigen::Vector2d& p) {
    return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
  };

  for (Eigen::Index f = 0; f < mesh.faces.rows(); ++f) {
    const int i0 = mesh.faces(f, 0);
    const int i1 = mesh.faces(f, 1);
    const int i2 = mesh.faces(f, 2);
    const double z0 = xc[i0].z();
    const double z1 = xc[i1].z();
    const double z2 = xc[i2].z();
    if (z0 <= kMinDepth || z1 <= kMinDepth || z2 <= kMinDepth) continue;
    const auto& s0 = screen[i0];
    const auto& s1 = screen[i1];
    const auto& s2 = screen[i2];
    const double area = edge(s0, s1, s2);
    if (std::abs(area) < 1e-14) continue;

    const int x_lo = std::max(0, static_cast<int>(std::ceil(std::min({s0.x(), s1.x(), s2.x()}))));
    const int x_hi = std::min(w - 1, static_cast<int>(std::floor(std::max({s0.x(), s1.x(), s2.x()}))));
    const int y_lo = std::max(0, static_cast<int>(std::ceil(std::min({s0.y(), s1.y(), s2.y()}))));
    const int y_hi = std::min(h - 1, static_cast<int>(std::floor(std::max({s0.y(), s1.y(), s2.y()}))));
    for (int y = y_lo; y <= y_hi; ++y) {
      for (int x = x_lo; x <= x_hi; ++x) {
        const Eigen::Vector2d p{static_cast<double>(x), static_cast<double>(y)};
        const double b0 = edge(s1, s2, p) / area;
        const double b1 = edge(s2, s0, p) / area;
        const double b2 = 1.0 - b0 - b1;
        if (b0 < -1e-9 || b1 < -1e-9 || b2 < -1e-9) continue;
        // Screen-space barycentrics are affine in 1/z.
        const double inv_z = b0 / z0 + b1 / z1 + b2 / z2;
        const double z = 1.0 / inv_z;
        const size_t pix = static_cast<size_t>(y) * w + x;
        if (!(z < zbuf[pix])) continue;
        zbuf[pix] = z;
        const double w0 = b0 / z0 * z;
        const double w1 = b1 / z1 * z;
        const double w2 = b2 / z2 * z;
        uvbuf[pix] = w0 * mesh.uv.row(i0).transpose() + w1 * mesh.uv.row(i1).transpose() +
                     w2 * mesh.uv.row(i2).transpose();
        nbuf[pix] = w0 * normal[i0] + w1 * normal[i1] + w2 * normal[i2];
      }
    }
  }

  RenderResult out;
  out.rgb = torch::zeros({h, w, 3}, torch::kUInt8);
  out.mask = torch::zeros({h, w}, torch::kBool);
  out.depth = torch::zeros({h, w}, torch::kFloat32);
  out.uv = torch::zeros({h, w, 2}, torch::kFloat32);
  auto rgb = out.rgb.accessor<uint8_t, 3>();
  auto mask = out.mask.accessor<bool, 2>();
  auto depth = out.depth.accessor<float, 2>();
  auto uv = out.uv.accessor<float, 3>();

  const Eigen::Vector3d to_light = -light_dir.normalized();
  const Eigen::Vector3d eye = cam.center();
  int covered = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const size_t pix = static_cast<size_t>(y) * w + x;
      if (zbuf[pix] == inf) continue;
      ++covered;
      const double z = zbuf[pix];
      double u = uvbuf[pix].x();
      const double v = std::clamp(uvbuf[pix].y(), 0.0, 1.0);
      u = std::clamp(u, 0.0, 1.0);
      if (u >= 1.0) u -= 1.0;

      const Eigen::Vector3d world = unproject({x, y}, z, cam);
      const Eigen::Vector3d to_eye = (eye - world).normalized();
      Eigen::Vector3d n = nbuf[pix].normalized();
      if (n.dot(to_eye) < 0.0) n = -n;
      const double lambert = std::max(0.0, n.dot(to_light));
      double spec = 0.0;
      if (lambert > 0.0) {
        const Eigen::Vector3d half = (to_light + to_eye).normalized();
        spec = std::pow(std::max(0.0, n.dot(half)), shading.shininess);
      }
      const Eigen::Vector3d color =
          uv_albedo(u, v) * (shading.ambient + shading.diffuse * lambert) +
          Eigen::Vector3d::Constant(shading.specular * spec);
      for (int c = 0; c < 3; ++c) {
        rgb[y][x][c] = static_cast<uint8_t>(std::lround(255.0 * std::clamp(color(c), 0.0, 1.0)));
      }
      mask[y][x] = true;
      depth[y][x] = static_cast<float>(z);
      uv[y][x][0] = static_cast<float>(u);
      uv[y][x][1] = static_cast<float>(v);
    }
  }
  if (covered == 0) throw DataError("rasterize: object does not project into the image");
  return out;
}

void GeneratorConfig::validate() const {
  if (n_instances < 1) throw ConfigError("n_instances must be >= 1");
  if (n_views < 1) throw ConfigError("n_views must be >= 1");
  if (image_size < 8 || image_size % 8 != 0) throw ConfigError("image_size must be a multiple of 8");
  if (posmap_resolution < 4) throw ConfigError("posmap_resolution must be >= 4");
  if (sphere_resolution < 8) throw ConfigError("sphere_resolution must be >= 8");
  if (!(focal > 0.0)) throw ConfigError("focal must be positive");
  if (!(train_fraction > 0.0 && val_fraction >= 0.0 && train_fraction + val_fraction <= 1.0)) {
    throw ConfigError("split fractions must satisfy 0 < train, 0 <= val, train + val <= 1");
  }
  if (workers < 1) throw ConfigError("workers must be >= 1");
  InstanceSpec{seed, n_harmonics, amplitude, base_radius}.validate();
  // Orbit parameters are checked by the camera generator.
  generate_orbit_camera(0, n_views, orbit_radius, elevation_deg, {image_size, image_size},
                        {focal, focal});
}

nlohmann::json GeneratorConfig::to_json() const {
  return {{"output_dir", output_dir.string()},
          {"n_instances", n_instances},
          {"n_views", n_views},
          {"image_size", image_size},
          {"posmap_resolution", posmap_resolution},
          {"sphere_resolution", sphere_resolution},
          {"orbit_radius", orbit_radius},
          {"elevation_deg", elevation_deg},
          {"focal", focal},
          {"n_harmonics", n_harmonics},
          {"amplitude", amplitude},
          {"base_radius", base_radius},
          {"seed", seed},
          {"train_fraction", train_fraction},
          {"val_fraction", val_fraction},
          {"workers", workers},
          {"shading",
           {{"ambient", shading.ambient},
            {"diffuse", shading.diffuse},
            {"specular", shading.specular},
            {"shininess", shading.shininess}}}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  config::reject_unknown(j,
                         {"output_dir", "n_instances", "n_views", "image_size", "posmap_resolution",
                          "sphere_resolution", "orbit_radius", "elevation_deg", "focal",
                          "n_harmonics", "amplitude", "base_radius", "seed", "train_fraction",
                          "val_fraction", "workers", "shading"},
                         "generator");
  GeneratorConfig c;
  std::string out = c.output_dir.string();
  config::read(j, "output_dir", out);
  c.output_dir = out;
  config::read(j, "n_instances", c.n_instances);
  config::read(j, "n_views", c.n_views);
  config::read(j, "image_size", c.image_size);
  config::read(j, "posmap_resolution", c.posmap_resolution);
  config::read(j, "sphere_resolution", c.sphere_resolution);
  config::read(j, "orbit_radius", c.orbit_radius);
  config::read(j, "elevation_deg", c.elevation_deg);
  config::read(j, "focal", c.focal);
  config::read(j, "n_harmonics", c.n_harmonics);
  config::read(j, "amplitude", c.amplitude);
  config::read(j, "base_radius", c.base_radius);
  config::read(j, "seed", c.seed);
  config::read(j, "train_fraction", c.train_fraction);
  config::read(j, "val_fraction", c.val_fraction);
  config::read(j, "workers", c.workers);
  if (auto it = j.find("shading"); it != j.end()) {
    config::reject_unknown(*it, {"ambient", "diffuse", "specular", "shininess"}, "generator.shading");
    config::read(*it, "ambient", c.shading.ambient);
    config::read(*it, "diffuse", c.shading.diffuse);
    config::read(*it, "specular", c.shading.specular);
    config::read(*it, "shininess", c.shading.shininess);
  }
  return c;
}

const std::vector<int>& DatasetSplits::get(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ConfigError("unknown split \"" + name + "\"");
}

uint64_t instance_seed(uint64_t dataset_seed, int instance_id) {
  return splitmix64(dataset_seed * 0x100000001B3ull + static_cast<uint64_t>(instance_id));
}

DatasetSplits make_splits(const GeneratorConfig& config) {
  const int n = config.n_instances;
  const int n_train = std::clamp(static_cast<int>(std::lround(config.train_fraction * n)), 1, n);
  const int n_val = std::clamp(static_cast<int>(std::lround(config.val_fraction * n)), 0, n - n_train);
  DatasetSplits s;
  for (int i = 0; i < n; ++i) {
    if (i < n_train) {
      s.train.push_back(i);
    } else if (i < n_train + n_val) {
      s.val.push_back(i);
    } else {
      s.test.push_back(i);
    }
  }
  return s;
}

PositionMap read_posmap(const fs::path& f32_path) {
  const auto side = io::read_json(io::sidecar_path(f32_path));
  auto grid = io::read_f32(f32_path);
  if (grid.dim() != 3 || grid.size(2) != 3 || grid.size(0) != grid.size(1)) {
    throw DataError("position map must be [S,S,3]: " + f32_path.string());
  }
  auto validity = io::unpack_bits_hex(side.at("validity").get<std::string>(), {grid.size(0), grid.size(1)});
  return {grid, validity};
}

void write_posmap(const fs::path& f32_path, const PositionMap& posmap) {
  io::write_f32(f32_path, posmap.grid,
                {{"validity", io::pack_bits_hex(posmap.validity)}, {"validity_encoding", "hex-msb-first"}});
}

void generate_dataset(const GeneratorConfig& config) {
  config.validate();
  const fs::path root = config.output_dir;
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw DataError("cannot create " + root.string() + ": " + ec.message());

  const auto splits = make_splits(config);
  std::vector<torch::Tensor> posmaps(config.n_instances);
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto worker = [&] {
    for (int id = next++; id < config.n_instances; id = next++) {
      try {
        const InstanceSpec spec{instance_seed(config.seed, id), config.n_harmonics, config.amplitude,
                                config.base_radius};
        const auto inst = make_instance(spec, config.sphere_resolution, config.posmap_resolution);
        const auto dir = instance_dir(root, id);
        fs::create_directories(dir);
        write_posmap(dir / "gt_posmap.f32", inst.posmap);
        posmaps[id] = inst.posmap.grid;
        for (int k = 0; k < config.n_views; ++k) {
          const auto cam = generate_orbit_camera(k, config.n_views, config.orbit_radius,
                                                 config.elevation_deg,
                                                 {config.image_size, config.image_size},
                                                 {config.focal, config.focal});
          const auto r = rasterize(inst.mesh, cam, cam.forward(), config.shading);
          const auto stem = view_stem(k);
          io::write_png(dir / (stem + ".png"), r.rgb);
          io::write_png(dir / (stem + "_mask.png"), r.mask.to(torch::kUInt8) * 255);
          io::write_f32(dir / (stem + "_depth.f32"), r.depth);
          io::write_f32(dir / (stem + "_uv.f32"), r.uv);
          io::write_json(dir / (stem + "_cam.json"), cam.to_json());
        }
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  const int n_workers = std::min(config.workers, config.n_instances);
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int i = 0; i < n_workers; ++i) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  // Texelwise mean over the training split, accumulated in a fixed order.
  auto sum = torch::zeros_like(posmaps[splits.train.front()]);
  for (int id : splits.train) sum += posmaps[id];
  const PositionMap avg{(sum / static_cast<double>(splits.train.size())).to(torch::kFloat32),
                        chart_validity(config.posmap_resolution)};
  write_posmap(root / "avg_posmap.f32", avg);

  auto category = config.to_json();
  category.erase("output_dir");
  category.erase("workers");
  io::write_json(root / "meta.json",
                 {{"format_version", 1},
                  {"category", category},
                  {"resolutions",
                   {{"image", {config.image_size, config.image_size}},
                    {"posmap", config.posmap_resolution}}},
                  {"splits", {{"train", splits.train}, {"val", splits.val}, {"test", splits.test}}}});
}

const InstanceRecord& Dataset::instance(int id) const {
  for (const auto& inst : instances) {
    if (inst.id == id) return inst;
  }
  throw DataError("instance " + std::to_string(id) + " not loaded");
}

Dataset load_dataset(const fs::path& root, const std::vector<std::string>& splits) {
  if (!fs::exists(root / "meta.json")) throw DataError("no dataset at " + root.string());
  const auto meta = io::read_json(root / "meta.json");
  Dataset ds;
  ds.root = root;
  try {
    ds.config = GeneratorConfig::from_json(meta.at("category"));
    ds.config.output_dir = root;
    const auto& s = meta.at("splits");
    ds.splits.train = s.at("train").get<std::vector<int>>();
    ds.splits.val = s.at("val").get<std::vector<int>>();
    ds.splits.test = s.at("test").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("meta.json: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("meta.json: ") + e.what());
  }
  ds.avg_posmap = read_posmap(root / "avg_posmap.f32");

  std::vector<int> ids;
  const std::vector<std::string> wanted = splits.empty() ? std::vector<std::string>{"train", "val", "test"} : splits;
  for (const auto& name : wanted) {
    const auto& part = ds.splits.get(name);
    ids.insert(ids.end(), part.begin(), part.end());
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());

  const int n_views = ds.config.n_views;
  for (int id : ids) {
    const auto dir = instance_dir(root, id);
    InstanceRecord inst;
    inst.id = id;
    inst.gt_posmap = read_posmap(dir / "gt_posmap.f32");
    for (int k = 0; k < n_views; ++k) {
      const auto stem = view_stem(k);
      ViewRecord v;
      v.index = k;
      v.azimuth_deg = 360.0 * k / n_views;
      v.rgb = io::read_png(dir / (stem + ".png"));
      v.image = v.rgb.to(torch::kFloat32) / 255.0;
      v.mask = io::read_png(dir / (stem + "_mask.png")) > 127;
      v.depth = io::read_f32(dir / (stem + "_depth.f32"));
      v.gt_uv = io::read_f32(dir / (stem + "_uv.f32"));
      try {
        v.camera = CameraPose::from_json(io::read_json(dir / (stem + "_cam.json")));
      } catch (const ShapeError& e) {
        throw DataError(dir.string() + ": " + e.what());
      }
      inst.views.push_back(std::move(v));
    }
    ds.instances.push_back(std::move(inst));
  }
  return ds;
}

}  // namespace surfmap
