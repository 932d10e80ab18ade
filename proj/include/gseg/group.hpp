#pragma once

// Point stabilizers of the wallpaper groups p4 and p4m.
//
// An element F^m R^r is a planar map: R is a counter-clockwise quarter turn
// (x, y) -> (-y, x) and F the horizontal flip (x, y) -> (-x, y). The full
// groups also contain translations; those are carried by the sliding window
// of the convolution and never appear here.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace gseg {

enum class GroupKind { P1, P4, P4M };

class GroupSpec {
 public:
  constexpr GroupSpec() = default;
  constexpr explicit GroupSpec(GroupKind kind) : kind_(kind) {}

  static constexpr GroupSpec p1() { return GroupSpec(GroupKind::P1); }
  static constexpr GroupSpec p4() { return GroupSpec(GroupKind::P4); }
  static constexpr GroupSpec p4m() { return GroupSpec(GroupKind::P4M); }

  constexpr GroupKind kind() const { return kind_; }

  constexpr int order() const {
    switch (kind_) {
      case GroupKind::P1: return 1;
      case GroupKind::P4: return 4;
      case GroupKind::P4M: return 8;
    }
    return 1;
  }

  std::string_view name() const;
  static GroupSpec parse(std::string_view name);

  friend constexpr bool operator==(GroupSpec, GroupSpec) = default;

 private:
  GroupKind kind_ = GroupKind::P1;
};

struct StabilizerElement {
  int mirror = 0;         // m in {0, 1}
  int quarter_turns = 0;  // r in {0, 1, 2, 3}

  friend constexpr bool operator==(StabilizerElement, StabilizerElement) = default;
};

constexpr StabilizerElement identity_element() { return {0, 0}; }

/// Elements in canonical order: all unmirrored by ascending r, then all
/// mirrored by ascending r. Index 0 is the identity.
std::vector<StabilizerElement> enumerate(GroupSpec group);

/// Position of `g` in enumerate(group). Throws if g is not in the group.
int element_index(GroupSpec group, StabilizerElement g);

/// a o b: apply b first, then a.
constexpr StabilizerElement compose(StabilizerElement a, StabilizerElement b) {
  const int sign = b.mirror ? -1 : 1;
  const int r = ((sign * a.quarter_turns + b.quarter_turns) % 4 + 4) % 4;
  return {a.mirror ^ b.mirror, r};
}

constexpr StabilizerElement inverse(StabilizerElement g) {
  if (g.mirror) return g;
  return {0, (4 - g.quarter_turns) % 4};
}

/// Applies g to a point in doubled centered coordinates. Doubling keeps the
/// center of an even-sized grid on the integer lattice.
constexpr std::pair<int, int> act_on_point(StabilizerElement g, int x, int y) {
  for (int i = 0; i < g.quarter_turns; ++i) {
    const int t = x;
    x = -y;
    y = t;
  }
  if (g.mirror) x = -x;
  return {x, y};
}

/// Action of g on a cell of an n x n grid about the grid center. Works for
/// any n; for kernels the caller restricts n to odd sizes.
std::pair<int, int> act_on_grid(StabilizerElement g, int row, int col, int n);

/// Action on a k x k kernel offset. Rejects even k.
std::pair<int, int> act_on_offset(StabilizerElement g, std::pair<int, int> offset,
                                  int k);

/// table[i][j] = index of compose(element_i, element_j).
std::vector<std::vector<int>> cayley_table(GroupSpec group);

/// perm[h] = index of compose(inverse(g), element_h); i.e. the group channel
/// an output channel h reads from under the regular representation.
std::vector<int> regular_source_indices(GroupSpec group, StabilizerElement g);

std::string to_string(StabilizerElement g);

}  // namespace gseg
