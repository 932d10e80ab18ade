#include "gseg/group.hpp"

#include "gseg/error.hpp"

namespace gseg {

std::string_view GroupSpec::name() const {
  switch (kind_) {
    case GroupKind::P1: return "p1";
    case GroupKind::P4: return "p4";
    case GroupKind::P4M: return "p4m";
  }
  return "p1";
}

GroupSpec GroupSpec::parse(std::string_view name) {
  if (name == "p1") return p1();
  if (name == "p4") return p4();
  if (name == "p4m") return p4m();
  fail(ErrorKind::invalid_argument, "unknown group '" + std::string(name) + "'");
}

std::vector<StabilizerElement> enumerate(GroupSpec group) {
  std::vector<StabilizerElement> out;
  out.reserve(group.order());
  const int mirrors = group.kind() == GroupKind::P4M ? 2 : 1;
  const int turns = group.kind() == GroupKind::P1 ? 1 : 4;
  for (int m = 0; m < mirrors; ++m)
    for (int r = 0; r < turns; ++r) out.push_back({m, r});
  return out;
}

int element_index(GroupSpec group, StabilizerElement g) {
  const bool valid = g.mirror >= 0 && g.mirror <= 1 && g.quarter_turns >= 0 &&
                     g.quarter_turns <= 3;
  switch (group.kind()) {
    case GroupKind::P1:
      if (g == identity_element()) return 0;
      break;
    case GroupKind::P4:
      if (valid && g.mirror == 0) return g.quarter_turns;
      break;
    case GroupKind::P4M:
      if (valid) return 4 * g.mirror + g.quarter_turns;
      break;
  }
  fail(ErrorKind::invalid_argument,
       "element " + to_string(g) + " is not in group " + std::string(group.name()));
}

std::pair<int, int> act_on_grid(StabilizerElement g, int row, int col, int n) {
  const int x = 2 * col - (n - 1);
  const int y = (n - 1) - 2 * row;
  const auto [tx, ty] = act_on_point(g, x, y);
  return {((n - 1) - ty) / 2, (tx + (n - 1)) / 2};
}

std::pair<int, int> act_on_offset(StabilizerElement g, std::pair<int, int> offset,
                                  int k) {
  require(k > 0 && k % 2 == 1, ErrorKind::invalid_argument,
          "kernel size must be odd, got " + std::to_string(k));
  const auto [row, col] = offset;
  require(row >= 0 && row < k && col >= 0 && col < k, ErrorKind::invalid_argument,
          "offset outside the kernel grid");
  return act_on_grid(g, row, col, k);
}

std::vector<std::vector<int>> cayley_table(GroupSpec group) {
  const auto elems = enumerate(group);
  std::vector<std::vector<int>> table(elems.size(), std::vector<int>(elems.size()));
  for (size_t i = 0; i < elems.size(); ++i)
    for (size_t j = 0; j < elems.size(); ++j)
      table[i][j] = element_index(group, compose(elems[i], elems[j]));
  return table;
}

std::vector<int> regular_source_indices(GroupSpec group, StabilizerElement g) {
  const auto elems = enumerate(group);
  const auto g_inv = inverse(g);
  std::vector<int> perm(elems.size());
  for (size_t h = 0; h < elems.size(); ++h)
    perm[h] = element_index(group, compose(g_inv, elems[h]));
  return perm;
}

std::string to_string(StabilizerElement g) {
  return "(" + std::to_string(g.mirror) + "," + std::to_string(g.quarter_turns) + ")";
}

}  // namespace gseg
