#include "hap/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <numeric>
#include <sstream>

#include "hap/errors.hpp"
#include "hap/random.hpp"

namespace hap {

Dataset make_dataset(InputShape shape, Index classes, Eigen::MatrixXd features, std::vector<Index> labels) {
  const Index n = static_cast<Index>(labels.size());
  if (n == 0) throw ShapeError("dataset is empty");
  if (features.rows() != n || features.cols() != shape.features()) throw ShapeError("dataset features do not match the input shape");
  Dataset d;
  d.shape = shape;
  d.classes = classes;
  d.inputs = Tensor(Shape{n, shape.features()});
  d.inputs.matrix() = features;
  d.targets = Tensor(Shape{n, classes});
  for (Index i = 0; i < n; ++i) {
    const Index y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= classes) throw ShapeError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    d.targets.matrix()(i, y) = 1.0;
  }
  d.labels = std::move(labels);
  return d;
}

Dataset Dataset::subset(std::span<const Index> rows) const {
  Eigen::MatrixXd x(static_cast<Index>(rows.size()), inputs.shape()[1]);
  std::vector<Index> y;
  y.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    x.row(static_cast<Index>(i)) = inputs.matrix().row(rows[i]);
    y.push_back(labels[static_cast<std::size_t>(rows[i])]);
  }
  return make_dataset(shape, classes, std::move(x), std::move(y));
}

Batch make_batch(const Dataset& data, std::span<const Index> rows) {
  const auto n = static_cast<Index>(rows.size());
  Tensor x(Shape{n, data.inputs.shape()[1]});
  Tensor t(Shape{n, data.classes});
  for (Index i = 0; i < n; ++i) {
    x.matrix().row(i) = data.inputs.matrix().row(rows[static_cast<std::size_t>(i)]);
    t.matrix().row(i) = data.targets.matrix().row(rows[static_cast<std::size_t>(i)]);
  }
  return {std::move(x), std::move(t)};
}

Split split(const Dataset& data, double validation_fraction, std::uint64_t seed) {
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) throw ConfigError("validation fraction must lie in (0, 1)");
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(mix_seed(seed, 0x73706c6974ULL));
  shuffle(order, rng);
  const auto n_val = static_cast<std::size_t>(std::lround(validation_fraction * static_cast<double>(order.size())));
  if (n_val == 0 || n_val == order.size()) throw ConfigError("split leaves an empty train or validation set");
  const std::span<const Index> all(order);
  return {data.subset(all.first(order.size() - n_val)), data.subset(all.last(n_val))};
}

// ---- IDX ---------------------------------------------------------------------------

namespace {

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

struct IdxReader {
  std::span<const std::uint8_t> bytes;
  std::string what;
  std::size_t pos = 0;

  std::uint32_t u32() {
    if (pos + 4 > bytes.size()) {
      throw FormatError(what + ": truncated header at byte " + std::to_string(pos) + " (file has " +
                        std::to_string(bytes.size()) + " bytes)");
    }
    const std::uint32_t v = (std::uint32_t{bytes[pos]} << 24) | (std::uint32_t{bytes[pos + 1]} << 16) |
                            (std::uint32_t{bytes[pos + 2]} << 8) | std::uint32_t{bytes[pos + 3]};
    pos += 4;
    return v;
  }

  std::vector<std::uint32_t> header(std::uint32_t magic) {
    const std::uint32_t got = u32();
    if (got != magic) {
      throw FormatError(what + ": bad magic at byte 0: expected " + hex32(magic) + ", found " + hex32(got));
    }
    std::vector<std::uint32_t> dims;
    for (std::uint32_t d = 0; d < (magic & 0xff); ++d) dims.push_back(u32());
    std::size_t count = 1;
    for (auto d : dims) count *= d;
    if (bytes.size() - pos != count) {
      throw FormatError(what + ": payload at byte " + std::to_string(pos) + " has " + std::to_string(bytes.size() - pos) +
                        " bytes, header declares " + std::to_string(count));
    }
    return dims;
  }
};

}  // namespace

Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels) {
  IdxReader ri{images, "idx images"};
  IdxReader rl{labels, "idx labels"};
  const auto idims = ri.header(0x00000803);
  const auto ldims = rl.header(0x00000801);
  if (idims[0] != ldims[0]) {
    throw FormatError("idx: " + std::to_string(idims[0]) + " images but " + std::to_string(ldims[0]) + " labels");
  }
  const auto n = static_cast<Index>(idims[0]);
  const auto h = static_cast<Index>(idims[1]);
  const auto w = static_cast<Index>(idims[2]);
  Eigen::MatrixXd x(n, h * w);
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < h * w; ++k) x(i, k) = images[ri.pos + static_cast<std::size_t>(i * h * w + k)] / 255.0;
  std::vector<Index> y(static_cast<std::size_t>(n));
  Index classes = 0;
  for (Index i = 0; i < n; ++i) {
    y[static_cast<std::size_t>(i)] = labels[rl.pos + static_cast<std::size_t>(i)];
    classes = std::max(classes, y[static_cast<std::size_t>(i)] + 1);
  }
  return make_dataset({1, h, w}, classes, std::move(x), std::move(y));
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  return parse_idx(read_bytes(images_path), read_bytes(labels_path));
}

// ---- CSV -----------------------------------------------------------------------------

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) {
    const auto a = field.find_first_not_of(" \t\r");
    const auto b = field.find_last_not_of(" \t\r");
    out.push_back(a == std::string::npos ? "" : field.substr(a, b - a + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

Dataset parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(in, line)) throw FormatError("csv: missing header at byte 0");
  const auto header = split_fields(line);
  offset += line.size() + 1;
  auto label_it = std::find(header.begin(), header.end(), "label");
  const std::size_t label_col = label_it != header.end() ? static_cast<std::size_t>(label_it - header.begin()) : header.size() - 1;
  if (header.size() < 2) throw FormatError("csv: header at byte 0 needs at least one feature and a label column");

  std::vector<std::vector<double>> rows;
  std::vector<std::string> raw_labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t start = offset;
    offset += line.size() + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = split_fields(line);
    if (fields.size() != header.size()) {
      throw FormatError("csv: line " + std::to_string(line_no) + " (byte " + std::to_string(start) + ") has " +
                        std::to_string(fields.size()) + " fields, header has " + std::to_string(header.size()));
    }
    std::vector<double> row;
    for (std::size_t c = 0; c < fields.size(); ++c) {
      if (c == label_col) continue;
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(fields[c], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != fields[c].size()) {
        throw FormatError("csv: line " + std::to_string(line_no) + " (byte " + std::to_string(start) + "): column '" +
                          header[c] + "' is not a number: '" + fields[c] + "'");
      }
      row.push_back(v);
    }
    rows.push_back(std::move(row));
    raw_labels.push_back(fields[label_col]);
  }
  if (rows.empty()) throw FormatError("csv: no data rows after the header");
  std::map<std::string, Index> classes;
  for (const auto& l : raw_labels) classes.emplace(l, 0);
  Index next = 0;
  for (auto& [name, id] : classes) id = next++;
  const auto n = static_cast<Index>(rows.size());
  const auto f = static_cast<Index>(rows[0].size());
  Eigen::MatrixXd x(n, f);
  std::vector<Index> y;
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < f; ++k) x(i, k) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
    y.push_back(classes.at(raw_labels[static_cast<std::size_t>(i)]));
  }
  return make_dataset({f, 1, 1}, static_cast<Index>(classes.size()), std::move(x), std::move(y));
}

Dataset load_csv(const std::string& path) {
  const auto bytes = read_bytes(path);
  return parse_csv(std::string(bytes.begin(), bytes.end()));
}

// ---- generators --------------------------------------------------------------------

Dataset gaussian_blobs(Index n, Index classes, Index features, double spread, std::uint64_t seed) {
  if (n < 1 || classes < 2 || features < 1) throw ConfigError("gaussian-blobs: need n >= 1, classes >= 2, features >= 1");
  Rng rng(seed);
  Eigen::MatrixXd centers(classes, features);
  for (Index i = 0; i < centers.size(); ++i) centers.data()[i] = uniform(rng, -5.0, 5.0);
  Eigen::MatrixXd x(n, features);
  std::vector<Index> y;
  for (Index i = 0; i < n; ++i) {
    const Index c = i % classes;
    for (Index k = 0; k < features; ++k) x(i, k) = centers(c, k) + spread * normal(rng);
    y.push_back(c);
  }
  return make_dataset({features, 1, 1}, classes, std::move(x), std::move(y));
}

Dataset two_spirals(Index n, double noise, std::uint64_t seed) {
  if (n < 2) throw ConfigError("two-spirals: need n >= 2");
  Rng rng(seed);
  Eigen::MatrixXd x(n, 2);
  std::vector<Index> y;
  for (Index i = 0; i < n; ++i) {
    const Index c = i % 2;
    const double t = std::sqrt(uniform01(rng));
    const double angle = 3.0 * std::numbers::pi * t + std::numbers::pi * static_cast<double>(c);
    x(i, 0) = t * std::cos(angle) + noise * normal(rng);
    x(i, 1) = t * std::sin(angle) + noise * normal(rng);
    y.push_back(c);
  }
  return make_dataset({2, 1, 1}, 2, std::move(x), std::move(y));
}

namespace {

void stroke(Eigen::Matrix<double, 8, 8>& img, Index shape, Rng& rng) {
  auto pick = [&](Index lo, Index hi) { return lo + static_cast<Index>(below(rng, static_cast<std::uint64_t>(hi - lo + 1))); };
  const Index len = pick(4, 6);
  switch (shape) {
    case 0: {  // horizontal bar
      const Index r = pick(0, 7), c = pick(0, 8 - len);
      for (Index k = 0; k < len; ++k) img(r, c + k) = 1.0;
      break;
    }
    case 1: {  // vertical bar
      const Index r = pick(0, 8 - len), c = pick(0, 7);
      for (Index k = 0; k < len; ++k) img(r + k, c) = 1.0;
      break;
    }
    case 2: {  // diagonal
      const Index r = pick(0, 8 - len), c = pick(0, 8 - len);
      for (Index k = 0; k < len; ++k) img(r + k, c + k) = 1.0;
      break;
    }
    case 3: {  // anti-diagonal
      const Index r = pick(0, 8 - len), c = pick(len - 1, 7);
      for (Index k = 0; k < len; ++k) img(r + k, c - k) = 1.0;
      break;
    }
    case 4: {  // hollow square
      const Index s = pick(3, 5), r = pick(0, 8 - s), c = pick(0, 8 - s);
      for (Index k = 0; k < s; ++k) img(r, c + k) = img(r + s - 1, c + k) = img(r + k, c) = img(r + k, c + s - 1) = 1.0;
      break;
    }
    default: {  // plus
      const Index r = pick(1, 6), c = pick(1, 6);
      img(r, c) = img(r - 1, c) = img(r + 1, c) = img(r, c - 1) = img(r, c + 1) = 1.0;
      break;
    }
  }
}

}  // namespace

Dataset tiny_shapes(Index n, Index classes, double noise, std::uint64_t seed) {
  if (n < 1 || classes < 2 || classes > kTinyShapeClasses) throw ConfigError("tiny-shapes: need n >= 1 and 2..6 classes");
  Rng rng(seed);
  Eigen::MatrixXd x(n, 64);
  std::vector<Index> y;
  for (Index i = 0; i < n; ++i) {
    const Index c = i % classes;
    Eigen::Matrix<double, 8, 8> img = Eigen::Matrix<double, 8, 8>::Zero();
    stroke(img, c, rng);
    for (Index r = 0; r < 8; ++r)
      for (Index k = 0; k < 8; ++k) x(i, r * 8 + k) = img(r, k) + noise * normal(rng);
    y.push_back(c);
  }
  return make_dataset({1, 8, 8}, classes, std::move(x), std::move(y));
}

Dataset tiny_shape_rows(Index n, Index classes, double noise, std::uint64_t seed) {
  const Dataset img = tiny_shapes(n, classes, noise, seed);
  Eigen::MatrixXd x(n, 64);
  // feature c * P + p: channel = pixel column, position = row
  for (Index r = 0; r < 8; ++r)
    for (Index k = 0; k < 8; ++k) x.col(k * 8 + r) = img.inputs.matrix().col(r * 8 + k);
  return make_dataset({8, 8, 1}, classes, std::move(x), img.labels);
}

Dataset load_dataset(const DataSource& s) {
  if (s.kind == "gaussian-blobs") return gaussian_blobs(s.n, s.classes, s.features, s.noise, s.seed);
  if (s.kind == "two-spirals") return two_spirals(s.n, s.noise, s.seed);
  if (s.kind == "tiny-shapes") return tiny_shapes(s.n, s.classes, s.noise, s.seed);
  if (s.kind == "tiny-shape-rows") return tiny_shape_rows(s.n, s.classes, s.noise, s.seed);
  if (s.kind.rfind("csv:", 0) == 0) return load_csv(s.kind.substr(4));
  if (s.kind.rfind("idx:", 0) == 0) {
    const std::string rest = s.kind.substr(4);
    const auto comma = rest.find(',');
    if (comma == std::string::npos) throw ConfigError("idx source needs 'idx:<images>,<labels>'");
    return load_idx(rest.substr(0, comma), rest.substr(comma + 1));
  }
  throw ConfigError("unknown data source '" + s.kind + "'");
}

double accuracy(const ModelInstance& model, const Dataset& data) {
  const Eigen::MatrixXd out = predict(model, data.inputs);  // (K, N)
  Index correct = 0;
  for (Index i = 0; i < data.size(); ++i) {
    Index arg = 0;
    out.col(i).maxCoeff(&arg);
    correct += arg == data.labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace hap
