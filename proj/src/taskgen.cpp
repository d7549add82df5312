#include "fktlab/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "fktlab/errors.hpp"
#include "fktlab/rng.hpp"

namespace fktlab {

namespace {

constexpr std::uint64_t kPermTag = 0x7065726d;
constexpr std::uint64_t kAnchorTag = 0x616e6368;
constexpr std::uint64_t kPrivateTag = 0x70726976;
constexpr std::uint64_t kSampleTag = 0x73616d70;
constexpr std::uint64_t kNuisanceTag = 0x6e756973;

std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + p.string());
}

std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t off) {
  if (off + 4 > b.size()) throw FormatError("IDX stream truncated in header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::string hex(std::uint32_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s = "0x";
  for (int i = 7; i >= 0; --i) s += digits[(v >> (4 * i)) & 0xF];
  return s;
}

std::string seq_name(const std::string& base, std::uint64_t perm_seed) {
  return base + "/perm" + std::to_string(perm_seed);
}

}  // namespace

Tensor parse_idx_images(std::span<const std::uint8_t> bytes) {
  const std::uint32_t magic = be32(bytes, 0);
  if (magic != kIdxImageMagic) throw FormatError("bad IDX image magic " + hex(magic));
  const std::size_t n = be32(bytes, 4), rows = be32(bytes, 8), cols = be32(bytes, 12);
  if (n == 0 || rows == 0 || cols == 0) throw FormatError("IDX image stream has a zero dimension");
  if (bytes.size() != 16 + n * rows * cols) {
    throw FormatError("IDX image payload is " + std::to_string(bytes.size() - 16) + " bytes, expected " +
                      std::to_string(n * rows * cols));
  }
  Tensor t({n, 1, rows, cols});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = bytes[16 + i] / 255.0;
  return t;
}

std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  const std::uint32_t magic = be32(bytes, 0);
  if (magic != kIdxLabelMagic) throw FormatError("bad IDX label magic " + hex(magic));
  const std::size_t n = be32(bytes, 4);
  if (bytes.size() != 8 + n) {
    throw FormatError("IDX label payload is " + std::to_string(bytes.size() - 8) + " bytes, expected " +
                      std::to_string(n));
  }
  return {bytes.begin() + 8, bytes.end()};
}

TaskDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                     double test_fraction) {
  TaskDataset d;
  d.name = images.stem().string();
  d.features = parse_idx_images(read_file(images));
  d.labels = parse_idx_labels(read_file(labels));
  if (d.labels.size() != d.features.rows()) {
    throw ConsistencyError(std::to_string(d.features.rows()) + " images but " +
                           std::to_string(d.labels.size()) + " labels");
  }
  d.class_count = *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  assign_stratified_split(d, test_fraction);
  d.validate();
  return d;
}

void write_idx(const TaskDataset& data, const std::filesystem::path& images,
               const std::filesystem::path& labels) {
  const Shape s = data.sample_shape();
  const bool ok = (s.size() == 3 && s[0] == 1) || s.size() == 2;
  if (!ok) throw DimensionError(0, "IDX images need sample shape [1, rows, cols] or [rows, cols]");
  const std::size_t rows = s[s.size() - 2], cols = s[s.size() - 1];
  std::vector<std::uint8_t> img;
  put_be32(img, kIdxImageMagic);
  put_be32(img, static_cast<std::uint32_t>(data.size()));
  put_be32(img, static_cast<std::uint32_t>(rows));
  put_be32(img, static_cast<std::uint32_t>(cols));
  for (double v : data.features.data()) {
    img.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  std::vector<std::uint8_t> lab;
  put_be32(lab, kIdxLabelMagic);
  put_be32(lab, static_cast<std::uint32_t>(data.size()));
  for (int y : data.labels) {
    if (y < 0 || y > 255) throw ParameterError("IDX labels must fit in a byte");
    lab.push_back(static_cast<std::uint8_t>(y));
  }
  write_file(images, img);
  write_file(labels, lab);
}

std::vector<std::size_t> pixel_permutation(std::size_t d, std::uint64_t perm_seed) {
  std::vector<std::size_t> p(d);
  std::iota(p.begin(), p.end(), 0);
  if (perm_seed != 0) {
    Rng rng(derive_seed(perm_seed, {kPermTag}));
    rng.shuffle(std::span<std::size_t>(p));
  }
  return p;
}

TaskDataset permute_task(const TaskDataset& base, std::uint64_t perm_seed) {
  if (base.size() == 0) throw EmptyDatasetError("cannot permute an empty dataset");
  TaskDataset out = base;
  out.name = seq_name(base.name, perm_seed);
  const std::size_t d = base.features.row_size();
  const auto perm = pixel_permutation(d, perm_seed);
  for (std::size_t n = 0; n < base.size(); ++n) {
    const auto src = base.features.row(n);
    auto dst = out.features.row(n);
    for (std::size_t i = 0; i < d; ++i) dst[i] = src[perm[i]];
  }
  return out;
}

namespace {

void check_synth(const SynthSpec& s) {
  if (s.dim == 0) throw ParameterError("synthetic dim must be positive");
  if (s.classes < 2) throw ParameterError("synthetic tasks need at least 2 classes");
  if (!(s.similarity >= 0.0 && s.similarity <= 1.0)) throw ParameterError("similarity must lie in [0, 1]");
  if (!(s.noise >= 0.0) || !std::isfinite(s.noise)) throw ParameterError("noise must be a finite value >= 0");
  if (!(s.nuisance >= 0.0) || !std::isfinite(s.nuisance)) {
    throw ParameterError("nuisance must be a finite value >= 0");
  }
  if (s.samples < 10 * static_cast<std::size_t>(s.classes)) {
    throw ParameterError("synthetic tasks need at least 10 samples per class");
  }
  if (!(s.test_fraction >= 0.0 && s.test_fraction < 1.0)) throw ParameterError("test fraction must lie in [0, 1)");
  if (s.shape && shape_volume(*s.shape) != s.dim) throw ParameterError("synthetic shape volume must equal dim");
}

}  // namespace

Tensor synth_class_means(const SynthSpec& spec) {
  check_synth(spec);
  const auto c = static_cast<std::size_t>(spec.classes);
  Rng anchor(derive_seed(spec.anchor_seed, {kAnchorTag}));
  Rng priv(derive_seed(spec.seed, {kPrivateTag}));
  Tensor means({c, spec.dim});
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t j = 0; j < spec.dim; ++j) {
      const double a = anchor.normal();
      const double b = priv.normal();
      means.at(k, j) = spec.similarity * a + (1.0 - spec.similarity) * b;
    }
  }
  return means;
}

TaskDataset synth_task(const SynthSpec& spec) {
  const Tensor means = synth_class_means(spec);
  std::vector<double> u(spec.dim, 0.0);
  if (spec.nuisance > 0.0) {
    Rng rng(derive_seed(spec.anchor_seed, {kNuisanceTag}));
    double norm = 0.0;
    for (double& v : u) {
      v = rng.normal();
      norm += v * v;
    }
    for (double& v : u) v /= std::sqrt(norm);
  }
  Rng rng(derive_seed(spec.seed, {kSampleTag}));
  TaskDataset d;
  d.name = "synth" + std::to_string(spec.seed);
  d.class_count = spec.classes;
  Shape shape{spec.samples};
  const Shape sample = spec.shape ? *spec.shape : Shape{spec.dim};
  shape.insert(shape.end(), sample.begin(), sample.end());
  d.features = Tensor(shape);
  for (std::size_t n = 0; n < spec.samples; ++n) {
    const std::size_t y = n % static_cast<std::size_t>(spec.classes);
    d.labels.push_back(static_cast<int>(y));
    auto row = d.features.row(n);
    for (std::size_t j = 0; j < spec.dim; ++j) row[j] = means.at(y, j) + spec.noise * rng.normal();
    if (spec.nuisance > 0.0) {
      const double z = spec.nuisance * rng.normal();
      for (std::size_t j = 0; j < spec.dim; ++j) row[j] += z * u[j];
    }
  }
  assign_stratified_split(d, spec.test_fraction);
  d.validate();
  return d;
}

TaskDataset resize_nearest(const TaskDataset& data, const Shape& target) {
  const Shape src = data.sample_shape();
  if (src == target) return data;
  if (src.size() < 2 || src.size() != target.size() ||
      !std::equal(src.begin(), src.end() - 2, target.begin())) {
    throw SequenceError("cannot resize sample shape " + shape_to_string(src) + " to " + shape_to_string(target));
  }
  const std::size_t sh = src[src.size() - 2], sw = src.back();
  const std::size_t th = target[target.size() - 2], tw = target.back();
  const std::size_t planes = shape_volume(src) / (sh * sw);
  Shape full{data.size()};
  full.insert(full.end(), target.begin(), target.end());
  TaskDataset out = data;
  out.features = Tensor(full);
  for (std::size_t n = 0; n < data.size(); ++n) {
    const auto in = data.features.row(n);
    auto dst = out.features.row(n);
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t r = 0; r < th; ++r) {
        const std::size_t sr = r * sh / th;
        for (std::size_t c = 0; c < tw; ++c) {
          dst[(p * th + r) * tw + c] = in[(p * sh + sr) * sw + c * sw / tw];
        }
      }
    }
  }
  return out;
}

namespace {

TaskDataset materialize_base(const BaseSource& src) {
  if (const auto* idx = std::get_if<IdxSource>(&src)) return load_idx(idx->images, idx->labels, idx->test_fraction);
  return synth_task(std::get<SynthSpec>(src));
}

}  // namespace

TaskDataset materialize(const TaskDescriptor& d) {
  TaskDataset out;
  if (const auto* p = std::get_if<PermutedSource>(&d.source)) {
    out = permute_task(materialize_base(p->base), p->perm_seed);
  } else if (const auto* idx = std::get_if<IdxSource>(&d.source)) {
    out = materialize_base(*idx);
  } else {
    out = materialize_base(std::get<SynthSpec>(d.source));
  }
  if (!d.name.empty()) out.name = d.name;
  return out;
}

TaskSequence build_sequence(const SequenceSpec& spec) {
  if (spec.tasks.empty()) throw SequenceError("sequence spec has no tasks");
  TaskSequence seq;
  for (const auto& d : spec.tasks) {
    seq.tasks.push_back(materialize(d));
    seq.families.push_back(d.family);
  }
  if (spec.common_shape) {
    for (auto& t : seq.tasks) t = resize_nearest(t, *spec.common_shape);
    seq.sample_shape = *spec.common_shape;
  } else {
    seq.sample_shape = seq.tasks.front().sample_shape();
    for (const auto& t : seq.tasks) {
      if (t.sample_shape() != seq.sample_shape) {
        throw SequenceError("task " + t.name + " has sample shape " + shape_to_string(t.sample_shape()) +
                            " but " + seq.tasks.front().name + " has " + shape_to_string(seq.sample_shape) +
                            "; declare a common shape");
      }
    }
  }
  return seq;
}

std::vector<std::string> preset_names() { return {"mpc-mini", "tic-mini"}; }

Preset make_preset(const std::string& name, std::uint64_t data_seed) {
  auto sd = [&](std::uint64_t s) { return data_seed == 0 ? s : derive_seed(data_seed, {s}); };
  Preset p;
  p.name = name;
  if (name == "mpc-mini") {
    p.description =
        "6 tasks alternating permuted copies of one synthetic base (family 'perm') with "
        "noisier, smaller tasks drawn around a shared anchor (family 'synth')";
    p.hidden = {64, 64, 64};
    SynthSpec base;
    base.dim = 32;
    base.classes = 6;
    base.similarity = 0.0;
    base.noise = 0.6;
    base.samples = 600;
    base.seed = sd(101);
    base.anchor_seed = sd(100);
    base.nuisance = 3.0;
    SynthSpec fam = base;
    fam.similarity = 0.9;
    fam.noise = 2.0;
    fam.samples = 240;
    fam.anchor_seed = sd(200);
    for (int k = 0; k < 3; ++k) {
      p.spec.tasks.push_back({"perm" + std::to_string(k), "perm", PermutedSource{base, static_cast<std::uint64_t>(k)}});
      SynthSpec s = fam;
      s.seed = sd(201 + static_cast<std::uint64_t>(k));
      p.spec.tasks.push_back({"synth" + std::to_string(k), "synth", s});
    }
  } else if (name == "tic-mini") {
    p.description = "6 tasks; the first has 4x the samples and 2x the classes of the rest";
    p.hidden = {32, 32, 32};
    SynthSpec big;
    big.dim = 32;
    big.classes = 8;
    big.similarity = 0.0;
    big.noise = 0.6;
    big.samples = 1600;
    big.seed = sd(301);
    big.anchor_seed = sd(300);
    p.spec.tasks.push_back({"big", "big", big});
    for (int k = 0; k < 5; ++k) {
      SynthSpec s = big;
      s.classes = 4;
      s.samples = 400;
      s.similarity = 0.5;
      s.anchor_seed = sd(400);
      s.seed = sd(401 + static_cast<std::uint64_t>(k));
      p.spec.tasks.push_back({"small" + std::to_string(k), "small", s});
    }
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (choices: " + known + ")");
  }
  return p;
}

}  // namespace fktlab
