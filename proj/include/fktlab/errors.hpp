#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fktlab {

// Every error raised by the library derives from Error so callers (the CLI in
// particular) can map categories onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  DimensionError(std::size_t layer, const std::string& what)
      : Error("layer " + std::to_string(layer) + ": " + what), layer_(layer) {}
  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

class MissingHeadError : public Error {
 public:
  explicit MissingHeadError(int task)
      : Error("no classifier head for task " + std::to_string(task)),
        task_(task) {}
  int task() const noexcept { return task_; }

 private:
  int task_;
};

class NumericDivergenceError : public Error {
 public:
  NumericDivergenceError(std::size_t epoch, double loss)
      : Error("loss diverged at epoch " + std::to_string(epoch) +
              " (value " + std::to_string(loss) + ")"),
        epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

class EmptyDatasetError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class FrozenOverlapError : public Error {
 public:
  using Error::Error;
};

class UnknownTaskError : public Error {
 public:
  explicit UnknownTaskError(int task)
      : Error("unknown task " + std::to_string(task)), task_(task) {}
  int task() const noexcept { return task_; }

 private:
  int task_;
};

class EmptySubnetworkError : public Error {
 public:
  using Error::Error;
};

class InsufficientSamplesError : public Error {
 public:
  InsufficientSamplesError(int class_id, std::size_t count)
      : Error("class " + std::to_string(class_id) + " has " +
              std::to_string(count) + " sample(s); at least 2 are required"),
        class_id_(class_id) {}
  int class_id() const noexcept { return class_id_; }

 private:
  int class_id_;
};

class MissingScoreError : public Error {
 public:
  explicit MissingScoreError(int task)
      : Error("no usefulness score for frozen task " + std::to_string(task)),
        task_(task) {}
  int task() const noexcept { return task_; }

 private:
  int task_;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class SequenceError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fktlab
