#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fktlab {

// Task identifiers are 1-based positions in a task sequence.
enum class TaskId : int {};

constexpr int to_int(TaskId t) noexcept { return static_cast<int>(t); }
inline std::string to_string(TaskId t) { return std::to_string(to_int(t)); }

// One bit per filter per trainable layer (1 = member / gated on).
class FilterMask {
 public:
  FilterMask() = default;
  explicit FilterMask(const std::vector<std::size_t>& widths, bool value = false);
  explicit FilterMask(std::vector<std::vector<std::uint8_t>> bits);

  std::size_t layer_count() const noexcept { return bits_.size(); }
  std::size_t width(std::size_t layer) const { return bits_.at(layer).size(); }
  std::vector<std::size_t> widths() const;

  bool test(std::size_t layer, std::size_t filter) const {
    return bits_.at(layer).at(filter) != 0;
  }
  void set(std::size_t layer, std::size_t filter, bool value = true) {
    bits_.at(layer).at(filter) = value ? 1 : 0;
  }
  std::span<const std::uint8_t> layer(std::size_t l) const { return bits_.at(l); }

  std::size_t count() const;
  std::size_t count(std::size_t layer) const;
  bool any(std::size_t layer) const { return count(layer) > 0; }
  bool none() const { return count() == 0; }
  std::vector<std::size_t> members(std::size_t layer) const;

  bool same_shape(const FilterMask& other) const;
  bool subset_of(const FilterMask& other) const;
  bool intersects(const FilterMask& other) const;

  FilterMask& operator|=(const FilterMask& other);
  FilterMask& operator&=(const FilterMask& other);
  // Remove every bit set in other.
  FilterMask& subtract(const FilterMask& other);
  FilterMask complement() const;

  friend FilterMask operator|(FilterMask a, const FilterMask& b) { return a |= b; }
  friend FilterMask operator&(FilterMask a, const FilterMask& b) { return a &= b; }
  friend bool operator==(const FilterMask&, const FilterMask&) = default;

  // "1011|01" style rendering, one group per layer.
  std::string to_string() const;

 private:
  void require_same_shape(const FilterMask& other) const;
  std::vector<std::vector<std::uint8_t>> bits_;
};

}  // namespace fktlab
