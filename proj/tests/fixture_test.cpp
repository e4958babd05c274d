#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <string>

#include "condcl/fixture.hpp"

namespace condcl {
namespace {

std::string serialize(const std::vector<FixtureEntry>& entries) {
  std::ostringstream os(std::ios::binary);
  write_fixture(os, entries);
  return os.str();
}

std::vector<FixtureEntry> parse(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  return read_fixture(is);
}

TEST(Fixture, HeaderLayout) {
  const std::string bytes = serialize(generate_fixture(3, 1));
  ASSERT_GE(bytes.size(), 10u);
  EXPECT_EQ(bytes.substr(0, 4), "CCLF");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), kFixtureVersion);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 3);
  EXPECT_EQ(bytes.substr(7, 3), std::string(3, '\0'));
  EXPECT_EQ(bytes[10], 0);  // first op: yaware_infonce
}

TEST(Fixture, RoundTripIsBitExact) {
  const auto entries = generate_fixture(50, 7);
  const auto back = parse(serialize(entries));
  ASSERT_EQ(back.size(), 50u);
  for (std::size_t k = 0; k < back.size(); ++k) {
    EXPECT_EQ(back[k].op, entries[k].op);
    EXPECT_EQ(back[k].tau, entries[k].tau);
    EXPECT_EQ(back[k].lambda, entries[k].lambda);
    EXPECT_EQ(back[k].view1, entries[k].view1);
    EXPECT_EQ(back[k].weights, entries[k].weights);
    EXPECT_EQ(back[k].value, entries[k].value);
    EXPECT_EQ(back[k].grad2, entries[k].grad2);
  }
  EXPECT_EQ(serialize(back), serialize(entries));
}

TEST(Fixture, EveryOpAppearsAndEntriesReEvaluate) {
  const auto entries = parse(serialize(generate_fixture(50, 3)));
  std::vector<int> seen(kFixtureOpCount, 0);
  for (const auto& e : entries) {
    ++seen[static_cast<int>(e.op)];
    const LossResult r = evaluate_fixture_op(e.op, e.view1, e.view2, e.weights, e.tau, e.lambda);
    EXPECT_NEAR(r.value, e.value, 1e-12 * std::max(1.0, std::abs(e.value)));
    EXPECT_LE(max_abs_diff(r.grad_anchor, e.grad1), 1e-12);
    EXPECT_LE(max_abs_diff(r.grad_candidate, e.grad2), 1e-12);
    for (std::size_t i = 0; i < e.view1.rows(); ++i) EXPECT_NEAR(norm(e.view1.row(i)), 1.0, 1e-12);
  }
  for (int c : seen) EXPECT_EQ(c, 10);
}

TEST(Fixture, CombinedAtLambdaZeroIsAlignment) {
  for (const auto& e : generate_fixture(50, 5)) {
    if (e.op != FixtureOp::combined_objective || e.lambda != 0.0) continue;
    const auto a = evaluate_fixture_op(FixtureOp::conditional_alignment, e.view1, e.view2, e.weights, e.tau, 0.0);
    EXPECT_EQ(a.value, e.value);
  }
}

TEST(Fixture, GenerationIsDeterministic) {
  EXPECT_EQ(serialize(generate_fixture(10, 9)), serialize(generate_fixture(10, 9)));
  EXPECT_NE(serialize(generate_fixture(10, 9)), serialize(generate_fixture(10, 10)));
}

TEST(Fixture, MalformedInputRaisesFormatError) {
  const std::string good = serialize(generate_fixture(2, 1));
  EXPECT_THROW(parse("CCLX" + good.substr(4)), FormatError);
  EXPECT_THROW(parse(good.substr(0, good.size() - 3)), FormatError);
  EXPECT_THROW(parse(good + "x"), FormatError);
  std::string bad_version = good;
  bad_version[4] = 9;
  EXPECT_THROW(parse(bad_version), FormatError);
  std::string bad_op = good;
  bad_op[10] = 7;
  EXPECT_THROW(parse(bad_op), FormatError);
  EXPECT_THROW(parse(""), FormatError);
}

TEST(Fixture, WriterRejectsInconsistentShapes) {
  auto entries = generate_fixture(1, 1);
  entries[0].grad1 = Matrix(1, 1);
  std::ostringstream os;
  EXPECT_THROW(write_fixture(os, entries), ShapeMismatchError);
}

}  // namespace
}  // namespace condcl
