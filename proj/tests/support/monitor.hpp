#pragma once

// Included by every unit-test binary: the softmax normalisation of every
// attention forward pass run by the binary is checked to 1e-9.

#include <gtest/gtest.h>

#include "cadeblur/attention.hpp"

namespace cadeblur::testkit {

class NormalizationEnvironment : public ::testing::Environment {
 public:
  void SetUp() override {
    NormalizationMonitor::reset();
    NormalizationMonitor::enable(true);
  }
  void TearDown() override {
    NormalizationMonitor::enable(false);
    EXPECT_LT(NormalizationMonitor::max_deviation(), 1e-9)
        << "over " << NormalizationMonitor::passes() << " attention forward passes";
  }
};

inline ::testing::Environment* const normalization_environment =
    ::testing::AddGlobalTestEnvironment(new NormalizationEnvironment);

}  // namespace cadeblur::testkit
