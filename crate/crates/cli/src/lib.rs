//! Library side of the `idcol` command-line tool: scene files, the
//! multibody penalty demo and the subcommands.

pub mod commands;
pub mod demo;
pub mod scene;
