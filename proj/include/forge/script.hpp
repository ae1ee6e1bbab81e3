#pragma once

// Build script grammar: one command per line, whitespace-separated tokens,
// '#' comment lines, double-quoted literals with \n \" \\ escapes. A '!'
// prefix runs the line as an OS process instead of a built-in verb; '~'
// marks the command cache-exempt. Lines between 'par{' and '}' form an
// explicitly parallel group.

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

#include "forge/fsutil.hpp"

namespace forge {

struct ScriptCommand {
  std::vector<std::string> argv;
  bool os = false;
  bool no_cache = false;

  bool operator==(const ScriptCommand&) const = default;
};

struct ScriptItem {
  std::vector<ScriptCommand> commands;
  bool parallel = false;

  bool operator==(const ScriptItem&) const = default;
};

namespace detail {

inline std::vector<std::string> tokenize_line(std::string_view line,
                                              int lineno) {
  auto bad = [&](const std::string& why) {
    return UsageError("script line " + std::to_string(lineno) + ": " + why);
  };
  std::vector<std::string> out;
  size_t i = 0;
  while (i < line.size()) {
    if (std::isspace(static_cast<unsigned char>(line[i]))) {
      i++;
      continue;
    }
    std::string tok;
    bool any = false;
    while (i < line.size() &&
           !std::isspace(static_cast<unsigned char>(line[i]))) {
      if (line[i] == '"') {
        any = true;
        i++;
        bool closed = false;
        while (i < line.size()) {
          char c = line[i];
          if (c == '"') {
            closed = true;
            i++;
            break;
          }
          if (c == '\\') {
            if (i + 1 >= line.size()) throw bad("dangling backslash");
            char e = line[i + 1];
            if (e == 'n') tok += '\n';
            else if (e == '"') tok += '"';
            else if (e == '\\') tok += '\\';
            else throw bad(std::string("unknown escape \\") + e);
            i += 2;
            continue;
          }
          tok += c;
          i++;
        }
        if (!closed) throw bad("unterminated quote");
      } else {
        tok += line[i];
        i++;
      }
    }
    if (!tok.empty() || any) out.push_back(tok);
  }
  return out;
}

}  // namespace detail

inline std::vector<ScriptItem> parse_script(std::string_view text) {
  std::vector<ScriptItem> items;
  ScriptItem* group = nullptr;  // open par{ block, if any
  int lineno = 0;
  size_t pos = 0;
  while (pos <= text.size()) {
    size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(
        pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    lineno++;
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;

    size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) continue;
    size_t last = line.find_last_not_of(" \t\r");
    std::string_view body = line.substr(first, last - first + 1);
    if (body[0] == '#') continue;

    auto bad = [&](const std::string& why) {
      return UsageError("script line " + std::to_string(lineno) + ": " + why);
    };

    if (body == "par{") {
      if (group) throw bad("nested par{ groups are not supported");
      items.push_back(ScriptItem{{}, true});
      group = &items.back();
      continue;
    }
    if (body == "}") {
      if (!group) throw bad("'}' without an open par{ group");
      if (group->commands.empty()) throw bad("empty par{ group");
      group = nullptr;
      continue;
    }

    ScriptCommand sc;
    while (!body.empty() && (body[0] == '~' || body[0] == '!')) {
      if (body[0] == '~') sc.no_cache = true;
      else sc.os = true;
      body.remove_prefix(1);
      while (!body.empty() && (body[0] == ' ' || body[0] == '\t'))
        body.remove_prefix(1);
    }
    sc.argv = detail::tokenize_line(body, lineno);
    if (sc.argv.empty()) throw bad("no command after prefix");

    if (group) group->commands.push_back(std::move(sc));
    else items.push_back(ScriptItem{{std::move(sc)}, false});
  }
  if (group) throw UsageError("script ended inside a par{ group");
  return items;
}

}  // namespace forge
