// SPDX-License-Identifier: Apache-2.0
#include "ccoe/data.hpp"

#include <algorithm>

#include "ccoe/errors.hpp"

namespace ccoe {

std::string_view domain_name(Domain d) {
  switch (d) {
    case Domain::copy:
      return "copy";
    case Domain::reverse:
      return "reverse";
    case Domain::sort_digits:
      return "sort_digits";
    case Domain::mod_add:
      return "mod_add";
    case Domain::uppercase:
      return "uppercase";
  }
  return "?";
}

std::string_view domain_short_name(Domain d) {
  switch (d) {
    case Domain::copy:
      return "cpy";
    case Domain::reverse:
      return "rev";
    case Domain::sort_digits:
      return "srt";
    case Domain::mod_add:
      return "add";
    case Domain::uppercase:
      return "upc";
  }
  return "?";
}

std::optional<Domain> parse_domain(std::string_view name) {
  for (Domain d : kAllDomains)
    if (name == domain_name(d) || name == domain_short_name(d)) return d;
  return std::nullopt;
}

namespace {

bool all_of(std::string_view s, bool (*pred)(char)) {
  return !s.empty() && std::all_of(s.begin(), s.end(), pred);
}
bool is_lower(char c) { return c >= 'a' && c <= 'z'; }
bool is_alpha(char c) { return is_lower(c) || (c >= 'A' && c <= 'Z'); }
bool is_digit(char c) { return c >= '0' && c <= '9'; }

[[noreturn]] void bad_payload(Domain d, std::string_view payload) {
  throw DatasetError("payload '" + std::string(payload) + "' is not valid for domain " +
                     std::string(domain_name(d)));
}

}  // namespace

std::string apply_domain(Domain d, std::string_view payload) {
  std::string s(payload);
  switch (d) {
    case Domain::copy:
      if (!all_of(s, is_alpha)) bad_payload(d, payload);
      return s;
    case Domain::reverse:
      if (!all_of(s, is_alpha)) bad_payload(d, payload);
      std::reverse(s.begin(), s.end());
      return s;
    case Domain::uppercase:
      if (!all_of(s, is_alpha)) bad_payload(d, payload);
      for (char& c : s)
        if (is_lower(c)) c = static_cast<char>(c - 'a' + 'A');
      return s;
    case Domain::sort_digits:
      if (!all_of(s, is_digit)) bad_payload(d, payload);
      std::sort(s.begin(), s.end());
      return s;
    case Domain::mod_add: {
      // "k+digits": every digit shifted by k, mod 10
      if (s.size() < 3 || !is_digit(s[0]) || s[1] != '+') bad_payload(d, payload);
      std::string out = s.substr(2);
      if (!all_of(out, is_digit)) bad_payload(d, payload);
      for (char& c : out) c = static_cast<char>('0' + (c - '0' + s[0] - '0') % 10);
      return out;
    }
  }
  bad_payload(d, payload);
}

std::string sample_payload(Domain d, Rng& rng) {
  auto letters = [&](std::size_t n) {
    std::string s(n, 'a');
    for (char& c : s) c = static_cast<char>('a' + rng.below(26));
    return s;
  };
  auto digits = [&](std::size_t n) {
    std::string s(n, '0');
    for (char& c : s) c = static_cast<char>('0' + rng.below(10));
    return s;
  };
  switch (d) {
    case Domain::copy:
    case Domain::reverse:
    case Domain::uppercase:
      return letters(static_cast<std::size_t>(rng.range(3, 7)));
    case Domain::sort_digits:
      return digits(static_cast<std::size_t>(rng.range(2, 7)));
    case Domain::mod_add: {
      std::string k = digits(1);
      return k + "+" + digits(static_cast<std::size_t>(rng.range(2, 6)));
    }
  }
  return {};
}

Split split_of(std::string_view payload) {
  // FNV-1a
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : payload) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h % 10 == 0 ? Split::eval : Split::train;
}

std::string sample_payload_in(Domain d, Split split, Rng& rng) {
  for (;;) {
    std::string p = sample_payload(d, rng);
    if (split_of(p) == split) return p;
  }
}

Tokens task_prompt(std::string_view payload) {
  Tokens t{tokens::kBos, kNoTag};
  for (unsigned char c : payload) t.push_back(c);
  t.push_back('=');
  return t;
}

Tokens tagged_prompt(Domain d, std::string_view payload) {
  Tokens t{tokens::kBos, static_cast<TokenId>(1 + static_cast<int>(d))};
  for (unsigned char c : payload) t.push_back(c);
  t.push_back('=');
  return t;
}

Tokens answer_tokens(std::string_view answer) {
  Tokens t = encode_bytes(answer);
  t.push_back(tokens::kEos);
  return t;
}

ExampleSampler domain_sampler(Domain d, Split split) {
  return [d, split](Rng& rng) {
    const std::string p = sample_payload_in(d, split, rng);
    return Example{task_prompt(p), answer_tokens(apply_domain(d, p))};
  };
}

ExampleSampler pretraining_sampler(double abstain_rate) {
  if (abstain_rate < 0.0 || abstain_rate > 1.0) {
    throw ConfigError("abstain_rate must lie in [0, 1]");
  }
  return [abstain_rate](Rng& rng) {
    const bool abstain = rng.uniform() < abstain_rate;
    const Domain d = kAllDomains[rng.below(kAllDomains.size())];
    const std::string p = sample_payload_in(d, Split::train, rng);
    if (abstain) return Example{task_prompt(p), answer_tokens(kAbstain)};
    return Example{tagged_prompt(d, p), answer_tokens(apply_domain(d, p))};
  };
}

std::string CoTask::instruction() const {
  std::string s;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i) s += '>';
    s += domain_short_name(order[i]);
  }
  return s + ":" + payload;
}

std::vector<std::string> CoTask::chain() const {
  std::vector<std::string> out;
  std::string cur = payload;
  for (Domain d : order) {
    cur = apply_domain(d, cur);
    out.push_back(cur);
  }
  return out;
}

const std::vector<std::array<Domain, 2>>& composite_pairs() {
  static const std::vector<std::array<Domain, 2>> pairs = {
      {Domain::copy, Domain::reverse},    {Domain::reverse, Domain::copy},
      {Domain::copy, Domain::uppercase},  {Domain::reverse, Domain::uppercase},
      {Domain::mod_add, Domain::sort_digits},
  };
  return pairs;
}

CoTask sample_cotask(Rng& rng, Split split, bool singles, bool pairs) {
  if (!singles && !pairs) throw ConfigError("sample_cotask: no task kinds enabled");
  const std::size_t n_single = singles ? kAllDomains.size() : 0;
  const std::size_t n_pair = pairs ? composite_pairs().size() : 0;
  const std::size_t k = rng.below(n_single + n_pair);
  CoTask task;
  if (k < n_single) {
    task.order = {kAllDomains[k]};
  } else {
    const auto& p = composite_pairs()[k - n_single];
    task.order = {p[0], p[1]};
  }
  task.payload = sample_payload_in(task.order.front(), split, rng);
  return task;
}

}  // namespace ccoe
