#include <gtest/gtest.h>

#include <cmath>

#include "clan_forge/autodiff.hpp"

using namespace clan_forge;

TEST(Tensor, RejectsZeroDimensionAndLengthMismatch) {
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  const Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_THROW(t.item(), ShapeError);
  EXPECT_THROW(t.reshaped({4}), ShapeError);
}

TEST(Autodiff, ShapeErrorNamesOpAndShapes) {
  Tape tape;
  Var a = tape.leaf(Tensor({2, 3}));
  Var b = tape.leaf(Tensor({3, 2}));
  try {
    add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[3,2]"), std::string::npos);
  }
}

TEST(Autodiff, BackwardTwiceWithoutResetIsAnError) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
  Var y = sum(mul(x, x));
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
  EXPECT_THROW(tape.backward(y), std::logic_error);
  tape.reset_grads();
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Autodiff, NonScalarRootRejected) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Autodiff, ParentsPrecedeChildren) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1.0, -2.0, 3.0}));
  Var y = sum(relu(scale(x, 2.0)));
  (void)y;
  for (std::size_t i = 0; i < tape.size(); ++i)
    for (std::size_t p : tape.node(i).parents) EXPECT_LT(p, i);
}

TEST(Autodiff, StopGradientBlocksFlow) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
  Var y = sum(mul(stop_gradient(x), x));
  tape.backward(y);
  // Only the non-stopped factor contributes: d/dx (c·x) = c.
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 2.0);
}

TEST(Autodiff, LogClampHasZeroGradientBelowFloor) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({0.0, 0.5}));
  Var y = sum(log(x));
  EXPECT_DOUBLE_EQ(y.value().item(), std::log(kLogFloor) + std::log(0.5));
  tape.backward(y);
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 2.0);
}

TEST(Autodiff, SoftmaxSumsToOneAndIsStable) {
  Tape tape;
  Var x = tape.leaf(Tensor({1, 3, 1, 2}, std::vector<double>{1000.0, -5.0, 1001.0, 0.0, 999.0, 5.0}));
  const Tensor& p = softmax(x, 1).value();
  EXPECT_TRUE(p.all_finite());
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(p[i] + p[2 + i] + p[4 + i], 1.0, 1e-15);
  EXPECT_GT(p[2], p[0]);
}

TEST(Autodiff, SigmoidStableForLargeInputs) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({-800.0, 0.0, 800.0}));
  const Tensor& s = sigmoid(x).value();
  EXPECT_EQ(s[0], 0.0);
  EXPECT_EQ(s[1], 0.5);
  EXPECT_EQ(s[2], 1.0);
}

TEST(Autodiff, Conv2dMatchesDirectSum) {
  // 1×1×3×3 input, single 2×2 kernel, stride 1, no padding.
  Tape tape;
  Var x = tape.leaf(Tensor({1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9}));
  Var k = tape.leaf(Tensor({1, 1, 2, 2}, std::vector<double>{1, 0, 0, -1}));
  const Tensor& y = conv2d(x, k, 1, 0).value();
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y[i], -4.0);
}

TEST(Autodiff, Conv2dStrideAndPaddingShape) {
  Tape tape;
  Var x = tape.leaf(Tensor({2, 5, 32, 32}));
  Var k = tape.leaf(Tensor({8, 5, 4, 4}));
  EXPECT_EQ(conv2d(x, k, 2, 1).shape(), (Shape{2, 8, 16, 16}));
  Var bad = tape.leaf(Tensor({8, 4, 4, 4}));
  EXPECT_THROW(conv2d(x, bad, 2, 1), ShapeError);
}

TEST(Autodiff, UpsampleNearestRepeatsBlocks) {
  Tape tape;
  Var x = tape.leaf(Tensor({1, 1, 1, 2}, std::vector<double>{3.0, 7.0}));
  const Tensor& y = upsample_nearest(x, 2).value();
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 4}));
  EXPECT_EQ(y.values(), (std::vector<double>{3, 3, 7, 7, 3, 3, 7, 7}));
}

TEST(Autodiff, CosineDegenerateGivesZeroAndNoGradient) {
  Tape tape;
  Var a = tape.leaf(Tensor::vector({0.0, 0.0, 0.0}));
  Var b = tape.leaf(Tensor::vector({1.0, 2.0, 3.0}));
  const CosineVar c = cosine_similarity(a, b);
  EXPECT_TRUE(c.degenerate);
  EXPECT_EQ(c.similarity.value().item(), 0.0);
  tape.backward(c.similarity);
  for (double g : b.grad().data()) EXPECT_EQ(g, 0.0);
}

TEST(Autodiff, CosineOfParallelVectorsIsOne) {
  const CosineValue c = cosine_similarity(std::vector<double>{1, 2, 3}, std::vector<double>{2, 4, 6});
  EXPECT_FALSE(c.degenerate);
  EXPECT_LE(c.value, 1.0);
  EXPECT_NEAR(c.value, 1.0, 1e-15);
}

TEST(Autodiff, SignFaultFlipsOnlyTheNamedOp) {
  Tape tape;
  tape.inject_sign_fault(OpKind::scale);
  Var x = tape.leaf(Tensor::vector({1.0, 2.0}));
  Var y = sum(scale(x, 3.0));
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], -3.0);
  EXPECT_EQ(parse_op_kind("conv2d"), OpKind::conv2d);
  EXPECT_FALSE(parse_op_kind("no_such_op").has_value());
}
