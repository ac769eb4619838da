// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ccoe/rng.hpp"
#include "ccoe/tokenizer.hpp"

namespace ccoe {

/// The five synthetic domains standing in for real task corpora.
enum class Domain : std::uint8_t { copy, reverse, sort_digits, mod_add, uppercase };

inline constexpr std::array<Domain, 5> kAllDomains = {
    Domain::copy, Domain::reverse, Domain::sort_digits, Domain::mod_add, Domain::uppercase};

std::string_view domain_name(Domain d);
/// Three-letter form used in composite instructions: cpy, rev, srt, add, upc.
std::string_view domain_short_name(Domain d);
/// Accepts either the long or the short name.
std::optional<Domain> parse_domain(std::string_view name);

/// Ground-truth answer. Throws DatasetError if the payload is not valid for the domain.
std::string apply_domain(Domain d, std::string_view payload);

/// Lowercase letters, 3-7 long, for copy / reverse / uppercase; digits, 2-7
/// long, for sort_digits; "k+digits" with one key digit and 2-6 digits for
/// mod_add, whose answer adds k to every digit mod 10.
std::string sample_payload(Domain d, Rng& rng);

enum class Split : std::uint8_t { train, eval };

/// Deterministic 9:1 split keyed on the payload text alone, so a payload
/// lands on the same side for every domain and every seed.
Split split_of(std::string_view payload);

/// Byte in the tag slot of a prompt that names no domain.
inline constexpr TokenId kNoTag = 0;

/// Prompt seen by experts and by the base model at evaluation:
/// bos, kNoTag, payload, '='. Same layout as a tagged prompt.
Tokens task_prompt(std::string_view payload);

/// Prompt used to pretrain the backbone: bos, domain tag byte (1-5), payload, '='.
Tokens tagged_prompt(Domain d, std::string_view payload);

/// Answer text followed by eos.
Tokens answer_tokens(std::string_view answer);

/// Answer the backbone is pretrained to give for a prompt without a tag.
inline constexpr std::string_view kAbstain = "?";

struct Example {
  Tokens prompt;
  Tokens target;  // includes the closing eos
};

using ExampleSampler = std::function<Example(Rng&)>;

/// Untagged task examples for one domain, restricted to a split.
ExampleSampler domain_sampler(Domain d, Split split);

/// Pretraining mixture: tagged examples for every domain, and with
/// probability `abstain_rate` an untagged prompt answered with kAbstain.
ExampleSampler pretraining_sampler(double abstain_rate);

/// Draws a payload for `d` that falls in `split`.
std::string sample_payload_in(Domain d, Split split, Rng& rng);

/// A composite task: domains applied left to right to one payload.
struct CoTask {
  std::vector<Domain> order;
  std::string payload;

  /// e.g. "rev>upc:abcde"
  std::string instruction() const;
  /// Outputs after each step; back() is the final answer.
  std::vector<std::string> chain() const;
};

/// Ordered pairs whose second step accepts the first step's output.
const std::vector<std::array<Domain, 2>>& composite_pairs();

/// Single-domain tasks and composite pairs, drawn uniformly over the task
/// kinds (5 singles and the composite pairs), restricted to a split.
CoTask sample_cotask(Rng& rng, Split split, bool singles, bool pairs);

}  // namespace ccoe
