#include "fktlab/filter_mask.hpp"

#include <algorithm>

#include "fktlab/errors.hpp"

namespace fktlab {

FilterMask::FilterMask(const std::vector<std::size_t>& widths, bool value) {
  bits_.reserve(widths.size());
  for (std::size_t w : widths) bits_.emplace_back(w, value ? 1 : 0);
}

FilterMask::FilterMask(std::vector<std::vector<std::uint8_t>> bits) : bits_(std::move(bits)) {
  for (auto& layer : bits_) {
    for (auto& b : layer) b = b ? 1 : 0;
  }
}

std::vector<std::size_t> FilterMask::widths() const {
  std::vector<std::size_t> w;
  w.reserve(bits_.size());
  for (const auto& layer : bits_) w.push_back(layer.size());
  return w;
}

std::size_t FilterMask::count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < bits_.size(); ++l) n += count(l);
  return n;
}

std::size_t FilterMask::count(std::size_t layer) const {
  const auto& b = bits_.at(layer);
  return static_cast<std::size_t>(std::count(b.begin(), b.end(), std::uint8_t{1}));
}

std::vector<std::size_t> FilterMask::members(std::size_t layer) const {
  std::vector<std::size_t> out;
  const auto& b = bits_.at(layer);
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i]) out.push_back(i);
  }
  return out;
}

bool FilterMask::same_shape(const FilterMask& other) const { return widths() == other.widths(); }

void FilterMask::require_same_shape(const FilterMask& other) const {
  if (!same_shape(other)) throw ParameterError("filter masks have different layer widths");
}

bool FilterMask::subset_of(const FilterMask& other) const {
  require_same_shape(other);
  for (std::size_t l = 0; l < bits_.size(); ++l) {
    for (std::size_t i = 0; i < bits_[l].size(); ++i) {
      if (bits_[l][i] && !other.bits_[l][i]) return false;
    }
  }
  return true;
}

bool FilterMask::intersects(const FilterMask& other) const {
  require_same_shape(other);
  for (std::size_t l = 0; l < bits_.size(); ++l) {
    for (std::size_t i = 0; i < bits_[l].size(); ++i) {
      if (bits_[l][i] && other.bits_[l][i]) return true;
    }
  }
  return false;
}

FilterMask& FilterMask::operator|=(const FilterMask& other) {
  require_same_shape(other);
  for (std::size_t l = 0; l < bits_.size(); ++l) {
    for (std::size_t i = 0; i < bits_[l].size(); ++i) bits_[l][i] |= other.bits_[l][i];
  }
  return *this;
}

FilterMask& FilterMask::operator&=(const FilterMask& other) {
  require_same_shape(other);
  for (std::size_t l = 0; l < bits_.size(); ++l) {
    for (std::size_t i = 0; i < bits_[l].size(); ++i) bits_[l][i] &= other.bits_[l][i];
  }
  return *this;
}

FilterMask& FilterMask::subtract(const FilterMask& other) {
  require_same_shape(other);
  for (std::size_t l = 0; l < bits_.size(); ++l) {
    for (std::size_t i = 0; i < bits_[l].size(); ++i) {
      if (other.bits_[l][i]) bits_[l][i] = 0;
    }
  }
  return *this;
}

FilterMask FilterMask::complement() const {
  FilterMask out = *this;
  for (auto& layer : out.bits_) {
    for (auto& b : layer) b = b ? 0 : 1;
  }
  return out;
}

std::string FilterMask::to_string() const {
  std::string s;
  for (std::size_t l = 0; l < bits_.size(); ++l) {
    if (l) s += '|';
    for (auto b : bits_[l]) s += b ? '1' : '0';
  }
  return s;
}

}  // namespace fktlab
