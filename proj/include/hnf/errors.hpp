#pragma once

#include <stdexcept>
#include <string>

namespace hnf {

#define HNF_DEFINE_ERROR(NAME)                                    \
    struct NAME : std::runtime_error {                            \
        explicit NAME(const std::string& msg)                     \
            : std::runtime_error(std::string(#NAME ": ") + msg) {} \
    }

// tensor / expression engine
HNF_DEFINE_ERROR(ShapeMismatch);
HNF_DEFINE_ERROR(UnboundLeaf);
HNF_DEFINE_ERROR(UnknownName);

// A non-finite tensor anywhere in a computation. The engine-level
// NonFiniteResult refines it so ODE-facing code can catch either.
struct NonFiniteState : std::runtime_error {
    explicit NonFiniteState(const std::string& msg)
        : std::runtime_error("NonFiniteState: " + msg) {}

   protected:
    NonFiniteState(const std::string& prefix, const std::string& msg)
        : std::runtime_error(prefix + msg) {}
};

struct NonFiniteResult : NonFiniteState {
    explicit NonFiniteResult(const std::string& msg)
        : NonFiniteState("NonFiniteResult: ", msg) {}
};

// patcher
HNF_DEFINE_ERROR(EmptyImage);
HNF_DEFINE_ERROR(UnsupportedChannelCount);
HNF_DEFINE_ERROR(IndivisiblePatchSize);

// vision graphs
HNF_DEFINE_ERROR(KTooLarge);
HNF_DEFINE_ERROR(AsymmetricInput);
HNF_DEFINE_ERROR(ZeroDegreeNode);

// ode flow
HNF_DEFINE_ERROR(DegenerateNodes);
HNF_DEFINE_ERROR(TrajectoryMismatch);

// text path
HNF_DEFINE_ERROR(EmptyCategory);
HNF_DEFINE_ERROR(FixtureMiss);
HNF_DEFINE_ERROR(TransportError);
HNF_DEFINE_ERROR(EmptyCorpus);
HNF_DEFINE_ERROR(EmptySequence);
HNF_DEFINE_ERROR(IncompleteBank);

// harness
HNF_DEFINE_ERROR(UndecodableImage);
HNF_DEFINE_ERROR(TooFewItems);
HNF_DEFINE_ERROR(EmptySplit);
HNF_DEFINE_ERROR(NonFiniteLoss);
HNF_DEFINE_ERROR(CorruptCheckpoint);
HNF_DEFINE_ERROR(IncompatibleConfig);

#undef HNF_DEFINE_ERROR

}  // namespace hnf
