//! Bx-Cy task streams: a base task of `B` classes, then tasks of `C`.
//!
//! Classes enter in ascending id order. A training image belongs to task
//! `t` when it contains at least one class of that task, so an image with
//! classes from several tasks recurs in each of them, annotated only with
//! the current task's classes. The evaluation set after task `t` holds every
//! test image containing a class learned so far.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    /// 1-indexed stage.
    pub stage: usize,
    pub classes: Vec<usize>,
    /// Indices into the training split.
    pub train: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub base: usize,
    pub increment: usize,
    pub tasks: Vec<Task>,
}

/// Class ids of every task. `base = 0` makes the first task `increment`
/// classes wide.
pub fn task_splits(n_classes: usize, base: usize, increment: usize) -> Result<Vec<Vec<usize>>> {
    if increment == 0 {
        return Err(Error::Protocol("increment C must be positive".into()));
    }
    if base > n_classes {
        return Err(Error::Protocol(format!("base B={base} exceeds {n_classes} classes")));
    }
    let rest = n_classes - base;
    if rest % increment != 0 {
        return Err(Error::Protocol(format!(
            "{rest} classes after the base task do not split into tasks of {increment}"
        )));
    }
    if n_classes == 0 {
        return Err(Error::Protocol("no classes".into()));
    }
    let mut splits = Vec::new();
    if base > 0 {
        splits.push((0..base).collect());
    }
    let mut start = base;
    while start < n_classes {
        splits.push((start..start + increment).collect());
        start += increment;
    }
    Ok(splits)
}

fn has_any(s: &Sample, classes: &[usize]) -> bool {
    classes.iter().any(|&c| s.labels.get(c) == Some(&1))
}

pub fn build_task_stream(ds: &Dataset, base: usize, increment: usize) -> Result<TaskStream> {
    let splits = task_splits(ds.n_classes(), base, increment)?;
    let tasks = splits
        .into_iter()
        .enumerate()
        .map(|(i, classes)| {
            let train = ds
                .train
                .iter()
                .enumerate()
                .filter(|(_, s)| has_any(s, &classes))
                .map(|(j, _)| j)
                .collect::<Vec<_>>();
            if train.is_empty() {
                return Err(Error::Protocol(format!("task {} has no training images", i + 1)));
            }
            Ok(Task {
                stage: i + 1,
                classes,
                train,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskStream {
        base,
        increment,
        tasks,
    })
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Classes of tasks `1..=stage`.
    pub fn learned_classes(&self, stage: usize) -> Vec<usize> {
        self.tasks[..stage].iter().flat_map(|t| t.classes.iter().copied()).collect()
    }

    /// Test indices evaluated after `stage`.
    pub fn eval_indices(&self, ds: &Dataset, stage: usize) -> Vec<usize> {
        let learned = self.learned_classes(stage);
        ds.test
            .iter()
            .enumerate()
            .filter(|(_, s)| has_any(s, &learned))
            .map(|(i, _)| i)
            .collect()
    }
}
