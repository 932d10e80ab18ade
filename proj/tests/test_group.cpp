#include <array>
#include <set>

#include "doctest.h"
#include "gseg/error.hpp"
#include "gseg/group.hpp"

using namespace gseg;

namespace {

// Independent model of the stabilizer: integer 2x2 matrices acting on
// column vectors (x, y). R is the counter-clockwise quarter turn, F the
// horizontal flip; element (m, r) is F^m R^r.
using Mat = std::array<std::array<int, 2>, 2>;

Mat mul(const Mat& a, const Mat& b) {
  Mat c{};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
  return c;
}

Mat matrix_of(StabilizerElement g) {
  const Mat rot{{{0, -1}, {1, 0}}};
  const Mat flip{{{-1, 0}, {0, 1}}};
  Mat m{{{1, 0}, {0, 1}}};
  for (int i = 0; i < g.quarter_turns; ++i) m = mul(rot, m);
  if (g.mirror) m = mul(flip, m);
  return m;
}

StabilizerElement element_of(const Mat& m) {
  for (int mirror = 0; mirror < 2; ++mirror)
    for (int r = 0; r < 4; ++r)
      if (matrix_of({mirror, r}) == m) return {mirror, r};
  FAIL("matrix is not a stabilizer element");
  return {};
}

// Offset (row, col) of a k x k grid through the matrix, centered at the
// middle cell, with y pointing up.
std::pair<int, int> offset_oracle(StabilizerElement g, std::pair<int, int> p, int k) {
  const int c = (k - 1) / 2;
  const int x = p.second - c, y = c - p.first;
  const Mat m = matrix_of(g);
  const int tx = m[0][0] * x + m[0][1] * y;
  const int ty = m[1][0] * x + m[1][1] * y;
  return {c - ty, tx + c};
}

constexpr std::array<GroupSpec, 3> kGroups{GroupSpec::p1(), GroupSpec::p4(), GroupSpec::p4m()};

}  // namespace

TEST_CASE("group orders and names") {
  CHECK(GroupSpec::p1().order() == 1);
  CHECK(GroupSpec::p4().order() == 4);
  CHECK(GroupSpec::p4m().order() == 8);
  for (GroupSpec g : kGroups) CHECK(GroupSpec::parse(g.name()) == g);
  CHECK_THROWS_AS(GroupSpec::parse("p6"), Error);
}

TEST_CASE("enumerate follows the canonical order") {
  using E = StabilizerElement;
  CHECK(enumerate(GroupSpec::p1()) == std::vector<E>{{0, 0}});
  CHECK(enumerate(GroupSpec::p4()) == std::vector<E>{{0, 0}, {0, 1}, {0, 2}, {0, 3}});
  const auto p4m = enumerate(GroupSpec::p4m());
  REQUIRE(p4m.size() == 8);
  for (int i = 0; i < 8; ++i) {
    CHECK(p4m[i].mirror == (i >= 4 ? 1 : 0));
    CHECK(p4m[i].quarter_turns == i % 4);
  }
  for (GroupSpec g : kGroups) {
    const auto elems = enumerate(g);
    CHECK(elems.front() == identity_element());
    std::set<std::pair<int, int>> distinct;
    for (auto e : elems) distinct.insert({e.mirror, e.quarter_turns});
    CHECK(distinct.size() == elems.size());
  }
}

TEST_CASE("compose and inverse on the listed cases") {
  CHECK(compose({0, 1}, {0, 1}) == StabilizerElement{0, 2});
  CHECK(compose({1, 0}, {1, 0}) == StabilizerElement{0, 0});
  CHECK(compose({0, 1}, {1, 0}) == StabilizerElement{1, 3});
  CHECK(inverse({0, 1}) == StabilizerElement{0, 3});
  CHECK(inverse({1, 2}) == StabilizerElement{1, 2});
  CHECK(compose({1, 2}, {1, 2}) == identity_element());
  CHECK(inverse({0, 0}) == StabilizerElement{0, 0});
}

TEST_CASE("compose matches matrix multiplication for every pair") {
  const auto elems = enumerate(GroupSpec::p4m());
  for (auto a : elems)
    for (auto b : elems) {
      CAPTURE(to_string(a));
      CAPTURE(to_string(b));
      CHECK(compose(a, b) == element_of(mul(matrix_of(a), matrix_of(b))));
    }
}

TEST_CASE("group axioms hold on every enumerated set") {
  for (GroupSpec group : kGroups) {
    const auto elems = enumerate(group);
    for (auto a : elems) {
      CHECK(compose(a, identity_element()) == a);
      CHECK(compose(identity_element(), a) == a);
      CHECK(compose(a, inverse(a)) == identity_element());
      CHECK(compose(inverse(a), a) == identity_element());
      for (auto b : elems) {
        CHECK_NOTHROW(element_index(group, compose(a, b)));
        for (auto c : elems) CHECK(compose(compose(a, b), c) == compose(a, compose(b, c)));
      }
    }
  }
}

TEST_CASE("element_index rejects elements outside the group") {
  CHECK_THROWS_AS(element_index(GroupSpec::p4(), {1, 0}), Error);
  CHECK_THROWS_AS(element_index(GroupSpec::p1(), {0, 1}), Error);
  CHECK(element_index(GroupSpec::p4m(), {1, 3}) == 7);
}

TEST_CASE("act_on_offset listed cases") {
  using P = std::pair<int, int>;
  CHECK(act_on_offset({0, 1}, {0, 2}, 3) == P{0, 0});
  CHECK(act_on_offset({0, 0}, {3, 1}, 5) == P{3, 1});
  CHECK(act_on_offset({1, 0}, {1, 0}, 3) == P{1, 2});
  CHECK_THROWS_AS(act_on_offset({0, 1}, {0, 0}, 4), Error);
  CHECK_THROWS_AS(act_on_offset({0, 1}, {3, 0}, 3), Error);
}

TEST_CASE("act_on_offset agrees with the matrix oracle, is a bijection and is compatible") {
  const auto elems = enumerate(GroupSpec::p4m());
  for (int k : {1, 3, 5, 7}) {
    for (auto g : elems) {
      std::set<std::pair<int, int>> image;
      for (int r = 0; r < k; ++r)
        for (int c = 0; c < k; ++c) {
          const auto t = act_on_offset(g, {r, c}, k);
          CHECK(t == offset_oracle(g, {r, c}, k));
          image.insert(t);
        }
      CHECK(image.size() == static_cast<size_t>(k * k));
    }
    for (auto a : elems)
      for (auto b : elems)
        for (int r = 0; r < k; ++r)
          for (int c = 0; c < k; ++c)
            CHECK(act_on_offset(compose(a, b), {r, c}, k) ==
                  act_on_offset(a, act_on_offset(b, {r, c}, k), k));
  }
}

TEST_CASE("act_on_grid is a compatible bijection on even grids too") {
  const auto elems = enumerate(GroupSpec::p4m());
  for (int n : {2, 4, 6}) {
    for (auto g : elems) {
      std::set<std::pair<int, int>> image;
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) image.insert(act_on_grid(g, r, c, n));
      CHECK(image.size() == static_cast<size_t>(n * n));
    }
    for (auto a : elems)
      for (auto b : elems)
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < n; ++c) {
            const auto [br, bc] = act_on_grid(b, r, c, n);
            CHECK(act_on_grid(compose(a, b), r, c, n) == act_on_grid(a, br, bc, n));
          }
  }
  // Quarter turn of a 2x2 grid: top-right cell goes to top-left.
  CHECK(act_on_grid({0, 1}, 0, 1, 2) == std::pair<int, int>{0, 0});
}

TEST_CASE("cayley_table") {
  CHECK(cayley_table(GroupSpec::p1()) == std::vector<std::vector<int>>{{0}});
  CHECK(cayley_table(GroupSpec::p4())[0] == std::vector<int>{0, 1, 2, 3});

  const auto elems = enumerate(GroupSpec::p4m());
  const auto table = cayley_table(GroupSpec::p4m());
  REQUIRE(table.size() == 8);
  for (int i = 0; i < 8; ++i) {
    std::set<int> row(table[i].begin(), table[i].end()), col;
    for (int j = 0; j < 8; ++j) {
      col.insert(table[j][i]);
      const StabilizerElement expected =
          element_of(mul(matrix_of(elems[i]), matrix_of(elems[j])));
      CHECK(elems[table[i][j]] == expected);
    }
    CHECK(row.size() == 8);
    CHECK(col.size() == 8);
  }
}

TEST_CASE("regular_source_indices reads channel g^-1 h") {
  const auto elems = enumerate(GroupSpec::p4());
  const auto perm = regular_source_indices(GroupSpec::p4(), {0, 1});
  for (int h = 0; h < 4; ++h) CHECK(elems[perm[h]] == compose({0, 3}, elems[h]));
  CHECK(perm == std::vector<int>{3, 0, 1, 2});
}
