#include "posegen/io.hpp"

#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/core.hpp>
#include <openssl/evp.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace posegen::io {

using json = nlohmann::json;

namespace {

constexpr char kMagic[4] = {'P', 'G', 'C', 'K'};

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& is, const fs::path& path) {
  T v;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("truncated checkpoint " + path.string());
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string take_string(std::istream& is, const fs::path& path) {
  const auto n = take<std::uint32_t>(is, path);
  if (n > (1u << 20)) throw std::runtime_error("corrupt checkpoint " + path.string());
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw std::runtime_error("truncated checkpoint " + path.string());
  return s;
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

}  // namespace

void save_checkpoint(const fs::path& path, const std::string& kind, std::uint64_t config_hash,
                     const ad::ParamSet& params) {
  if (!params.all_finite()) throw std::runtime_error("refusing to save non-finite parameters to " + path.string());
  std::ostringstream os(std::ios::binary);
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, config_hash);
  put_string(os, kind);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    put_string(os, params.names[i]);
    const auto& m = params.values[i];
    put<std::int64_t>(os, m.rows());
    put<std::int64_t>(os, m.cols());
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  write_text(path, os.str());
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("missing checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("not a checkpoint: " + path.string());
  const auto version = take<std::uint32_t>(is, path);
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  Checkpoint c;
  c.config_hash = take<std::uint64_t>(is, path);
  c.kind = take_string(is, path);
  const auto count = take<std::uint32_t>(is, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = take_string(is, path);
    const auto rows = take<std::int64_t>(is, path);
    const auto cols = take<std::int64_t>(is, path);
    if (rows < 0 || cols < 0 || rows * cols > (1LL << 28)) throw std::runtime_error("corrupt checkpoint " + path.string());
    Eigen::MatrixXd m(rows, cols);
    if (!is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double))))
      throw std::runtime_error("truncated checkpoint " + path.string());
    c.params.add(std::move(name), std::move(m));
  }
  return c;
}

void load_checkpoint(const fs::path& path, const std::string& kind, std::uint64_t expected_hash, ad::ParamSet& params) {
  Checkpoint c = read_checkpoint(path);
  if (c.kind != kind) throw std::runtime_error(path.string() + ": expected a " + kind + " checkpoint, found " + c.kind);
  if (c.config_hash != expected_hash) {
    std::ostringstream os;
    os << path.string() << ": config hash " << std::hex << c.config_hash << " does not match current config "
       << expected_hash;
    throw std::runtime_error(os.str());
  }
  if (c.params.size() != params.size()) throw std::runtime_error(path.string() + ": tensor count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (c.params.names[i] != params.names[i] || c.params.values[i].rows() != params.values[i].rows() ||
        c.params.values[i].cols() != params.values[i].cols())
      throw std::runtime_error(path.string() + ": tensor " + params.names[i] + " does not match the architecture");
  }
  params.values = std::move(c.params.values);
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  ensure_parent(path);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f << text;
    if (!f) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr))
    throw std::runtime_error("sha256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

render::Image quantize16(const render::Image& image) {
  render::Image q = image;
  for (Eigen::Index i = 0; i < q.pixels.size(); ++i)
    q.pixels(i) = std::round(std::clamp(q.pixels(i), 0.0, 1.0) * 65535.0) / 65535.0;
  return q;
}

void write_image(const fs::path& path, const render::Image& image) {
  if (image.channels != 1 && image.channels != 3) throw std::invalid_argument("write_image: need 1 or 3 channels");
  cv::Mat m(image.height, image.width, image.channels == 1 ? CV_16UC1 : CV_16UC3);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < image.channels; ++c) {
        const auto v = static_cast<std::uint16_t>(std::lround(std::clamp(image.at(y, x, c), 0.0, 1.0) * 65535.0));
        if (image.channels == 1)
          m.at<std::uint16_t>(y, x) = v;
        else
          m.at<cv::Vec<std::uint16_t, 3>>(y, x)[2 - c] = v;  // stored BGR
      }
  ensure_parent(path);
  if (!cv::imwrite(path.string(), m)) throw std::runtime_error("cannot write image " + path.string());
}

render::Image read_image(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("missing image " + path.string());
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw std::runtime_error("unreadable image " + path.string());
  if (m.depth() != CV_16U) throw std::runtime_error("expected a 16-bit image: " + path.string());
  const int ch = m.channels();
  if (ch != 1 && ch != 3) throw std::runtime_error("unsupported channel count in " + path.string());
  render::Image img(m.rows, m.cols, ch);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x)
      for (int c = 0; c < ch; ++c) {
        const std::uint16_t v = ch == 1 ? m.at<std::uint16_t>(y, x) : m.at<cv::Vec<std::uint16_t, 3>>(y, x)[2 - c];
        img.at(y, x, c) = v / 65535.0;
      }
  return img;
}

// ---------------------------------------------------------------------------

void append_ledger(const fs::path& dir, const LedgerEntry& e) {
  fs::create_directories(dir);
  json j;
  j["phase"] = e.phase;
  j["config_hash"] = e.config_hash;
  j["artifacts"] = e.artifacts;
  j["metrics"] = e.metrics;
  j["seconds"] = e.seconds;
  std::ofstream f(dir / "ledger.jsonl", std::ios::app | std::ios::binary);
  if (!f) throw std::runtime_error("cannot append to ledger in " + dir.string());
  f << j.dump() << "\n";
}

std::vector<LedgerEntry> read_ledger(const fs::path& dir) {
  std::vector<LedgerEntry> out;
  const fs::path p = dir / "ledger.jsonl";
  if (!fs::exists(p)) return out;
  std::istringstream in(read_text(p));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    LedgerEntry e;
    e.phase = j.at("phase").get<std::string>();
    e.config_hash = j.at("config_hash").get<std::string>();
    e.artifacts = j.at("artifacts").get<std::vector<std::string>>();
    e.metrics = j.at("metrics").get<std::map<std::string, double>>();
    e.seconds = j.at("seconds").get<double>();
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------

DatasetRecord make_record(const render::Image& image, const PoseVector& theta, const CameraView& k,
                          const std::string& split) {
  DatasetRecord r;
  r.theta = theta;
  r.k = k;
  r.joints = forward_kinematics(SkeletonDef::standard(), theta);
  r.split = split;
  r.pixels = image;
  return r;
}

namespace {

std::string image_name(std::size_t i) {
  std::ostringstream os;
  os << "images/" << std::setw(6) << std::setfill('0') << i << ".png";
  return os.str();
}

}  // namespace

void export_dataset(const DatasetManifest& m, const fs::path& dir) {
  fs::create_directories(dir / "images");
  std::ostringstream lines;
  std::vector<std::string> files;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    if (r.pixels.height != m.height || r.pixels.width != m.width || r.pixels.channels != m.channels)
      throw std::invalid_argument("export_dataset: record " + std::to_string(i) + " has the wrong resolution");
    const std::string name = r.image.empty() ? image_name(i) : r.image;
    write_image(dir / name, r.pixels);
    files.push_back(name);
    json j;
    j["image"] = name;
    j["theta"] = std::vector<double>(r.theta.values().data(), r.theta.values().data() + r.theta.size());
    j["k"] = std::vector<double>(r.k.values().data(), r.k.values().data() + 3);
    json joints = json::array();
    for (Eigen::Index a = 0; a < r.joints.rows(); ++a) joints.push_back({r.joints(a, 0), r.joints(a, 1), r.joints(a, 2)});
    j["joints"] = joints;
    j["split"] = r.split;
    lines << j.dump() << "\n";
  }
  json header;
  header["format"] = "posegen-dataset";
  header["version"] = 1;
  header["height"] = m.height;
  header["width"] = m.width;
  header["channels"] = m.channels;
  header["count"] = m.records.size();
  write_text(dir / "header.json", header.dump(2) + "\n");
  write_text(dir / "manifest.jsonl", lines.str());
  std::ostringstream sha;
  for (const std::string& f : std::vector<std::string>{"header.json", "manifest.jsonl"})
    sha << sha256_file(dir / f) << "  " << f << "\n";
  for (const auto& f : files) sha << sha256_file(dir / f) << "  " << f << "\n";
  write_text(dir / "MANIFEST.sha", sha.str());
}

DatasetManifest import_dataset(const fs::path& dir, int height, int width) {
  if (!fs::exists(dir / "MANIFEST.sha")) throw std::runtime_error("missing MANIFEST.sha in " + dir.string());
  std::istringstream sums(read_text(dir / "MANIFEST.sha"));
  std::string line;
  while (std::getline(sums, line)) {
    if (line.empty()) continue;
    const auto sep = line.find("  ");
    if (sep == std::string::npos) throw std::runtime_error("malformed MANIFEST.sha line: " + line);
    const std::string want = line.substr(0, sep), file = line.substr(sep + 2);
    if (!fs::exists(dir / file)) throw std::runtime_error("missing file " + file + " listed in MANIFEST.sha");
    if (sha256_file(dir / file) != want) throw std::runtime_error("checksum mismatch for " + file);
  }
  const json header = json::parse(read_text(dir / "header.json"));
  DatasetManifest m;
  m.height = header.at("height").get<int>();
  m.width = header.at("width").get<int>();
  m.channels = header.at("channels").get<int>();
  if ((height > 0 && m.height != height) || (width > 0 && m.width != width))
    throw std::runtime_error("dataset resolution " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                             " does not match the configured " + std::to_string(height) + "x" + std::to_string(width));
  std::istringstream in(read_text(dir / "manifest.jsonl"));
  const SkeletonDef& skel = SkeletonDef::standard();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    DatasetRecord r;
    r.image = j.at("image").get<std::string>();
    const auto theta = j.at("theta").get<std::vector<double>>();
    const auto k = j.at("k").get<std::vector<double>>();
    if (theta.size() != static_cast<std::size_t>(kPoseDim) || k.size() != 3)
      throw std::runtime_error("bad label sizes for " + r.image);
    r.theta = PoseVector(Eigen::Map<const Eigen::VectorXd>(theta.data(), kPoseDim));
    r.k = CameraView(Eigen::Vector3d(k[0], k[1], k[2]));
    const auto joints = j.at("joints").get<std::vector<std::vector<double>>>();
    if (joints.size() != static_cast<std::size_t>(skel.joint_count())) throw std::runtime_error("bad joint count for " + r.image);
    r.joints.resize(skel.joint_count(), 3);
    for (int a = 0; a < skel.joint_count(); ++a) {
      if (joints[a].size() != 3) throw std::runtime_error("bad joint entry for " + r.image);
      r.joints.row(a) << joints[a][0], joints[a][1], joints[a][2];
    }
    const JointSet fk = forward_kinematics(skel, r.theta);
    if ((fk - r.joints).cwiseAbs().maxCoeff() > 1e-6)
      throw std::runtime_error("joints of " + r.image + " disagree with forward kinematics of theta");
    r.split = j.at("split").get<std::string>();
    r.pixels = read_image(dir / r.image);
    if (r.pixels.height != m.height || r.pixels.width != m.width || r.pixels.channels != m.channels)
      throw std::runtime_error("image " + r.image + " does not match the dataset resolution");
    m.records.push_back(std::move(r));
  }
  if (m.records.size() != header.at("count").get<std::size_t>())
    throw std::runtime_error("manifest record count disagrees with header in " + dir.string());
  return m;
}

}  // namespace posegen::io
