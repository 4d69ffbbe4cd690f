pub mod asm;
pub mod machine;
pub mod transform;
pub mod verify;
pub mod equivalence;
pub mod corpus;
pub mod lab;
