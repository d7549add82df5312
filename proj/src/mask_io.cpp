#include "fktlab/mask_io.hpp"

#include <fstream>
#include <iterator>

#include "fktlab/errors.hpp"

namespace fktlab {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint8_t byte() {
    need(1);
    return b_[pos_++];
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) {
      throw FormatError("mask stream truncated at byte " + std::to_string(pos_));
    }
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_masks(const MaskTable& masks) {
  std::vector<std::uint8_t> out;
  put_u32(out, static_cast<std::uint32_t>(masks.size()));
  for (const auto& [task, m] : masks) {
    put_u32(out, static_cast<std::uint32_t>(to_int(task)));
    put_u32(out, static_cast<std::uint32_t>(m.layer_count()));
    for (std::size_t l = 0; l < m.layer_count(); ++l) {
      const std::size_t n = m.width(l);
      put_u32(out, static_cast<std::uint32_t>(n));
      std::vector<std::uint8_t> packed((n + 7) / 8, 0);
      for (std::size_t i = 0; i < n; ++i) {
        if (m.test(l, i)) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
      }
      out.insert(out.end(), packed.begin(), packed.end());
    }
  }
  return out;
}

MaskTable decode_masks(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  MaskTable out;
  const std::uint32_t records = r.u32();
  for (std::uint32_t k = 0; k < records; ++k) {
    const TaskId task{static_cast<int>(r.u32())};
    const std::uint32_t layers = r.u32();
    std::vector<std::vector<std::uint8_t>> bits(layers);
    for (auto& layer : bits) {
      const std::uint32_t n = r.u32();
      layer.assign(n, 0);
      std::uint8_t cur = 0;
      for (std::uint32_t i = 0; i < n; ++i) {
        if (i % 8 == 0) cur = r.byte();
        layer[i] = (cur >> (i % 8)) & 1u;
      }
      if (n % 8 != 0 && (cur >> (n % 8)) != 0) {
        throw FormatError("nonzero padding bits in mask of task " + to_string(task));
      }
    }
    if (!out.emplace(task, FilterMask(std::move(bits))).second) {
      throw FormatError("duplicate mask record for task " + to_string(task));
    }
  }
  if (!r.done()) throw FormatError("trailing bytes after mask records");
  return out;
}

nlohmann::json masks_to_json(const MaskTable& masks) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& [task, m] : masks) {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < m.layer_count(); ++l) {
      std::string s;
      for (std::size_t i = 0; i < m.width(l); ++i) s += m.test(l, i) ? '1' : '0';
      layers.push_back(s);
    }
    tasks.push_back({{"task", to_int(task)}, {"layers", layers}});
  }
  return {{"tasks", tasks}};
}

MaskTable masks_from_json(const nlohmann::json& j) {
  MaskTable out;
  try {
    for (const auto& rec : j.at("tasks")) {
      std::vector<std::vector<std::uint8_t>> bits;
      for (const auto& layer : rec.at("layers")) {
        std::vector<std::uint8_t> row;
        for (char c : layer.get<std::string>()) {
          if (c != '0' && c != '1') throw FormatError(std::string("bad mask character '") + c + "'");
          row.push_back(c == '1');
        }
        bits.push_back(std::move(row));
      }
      out.emplace(TaskId{rec.at("task").get<int>()}, FilterMask(std::move(bits)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("mask json: ") + e.what());
  }
  return out;
}

void write_masks(const std::filesystem::path& path, const MaskTable& masks) {
  const auto bytes = encode_masks(masks);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

MaskTable read_masks(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_masks(bytes);
}

}  // namespace fktlab
